"""Transposable butterfly distribution and reduction networks.

Wiring: butterfly stage ``s`` (0-based) pairs port ``j`` with ``j ^ (1 << s)``,
lowest bit first.  A distribution mux either keeps its vertical input (0) or
takes the diagonal one (1).  The transpose layer is a fixed corner-turn
permutation: with ``c = 2**(log2(N) // 2)`` and ``r = N // c``, port
``a*c + b`` moves to ``b*r + a``.  It sits before the butterfly stages in
distribution and after them in reduction.

Every value has exactly one path from a given source to a given destination
(bit fixing), so routing is decided exactly by checking the forced paths for
mux/switch conflicts.
"""

from __future__ import annotations

import enum
import json
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np


class FabricKind(str, enum.Enum):
    DISTRIBUTION = "Distribution"
    REDUCTION = "Reduction"


class SwitchMode(str, enum.Enum):
    PASS = "Pass"
    SWAP = "Swap"
    ADD_LEFT = "AddLeft"
    ADD_RIGHT = "AddRight"


class _Idle:
    """Marker carried by the unused output of an adding switch."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "IDLE"

    def __add__(self, other):
        return other

    __radd__ = __add__


IDLE = _Idle()


class Unroutable:
    """Returned (not raised) when a pattern cannot be realized."""

    def __init__(self, reason: str = ""):
        self.reason = reason

    def __bool__(self):
        return False

    def __repr__(self):
        return f"Unroutable({self.reason!r})"


def _log2(n: int) -> int:
    if n < 2 or n & (n - 1):
        raise ValueError(f"port count must be a power of two >= 2, got {n}")
    return n.bit_length() - 1


@dataclass(frozen=True)
class FabricConfig:
    n: int
    kind: FabricKind = FabricKind.DISTRIBUTION

    def __post_init__(self):
        _log2(self.n)

    @property
    def levels(self) -> int:
        return _log2(self.n)

    @property
    def stages(self) -> int:
        return self.levels + 1


def transpose_perm(n: int) -> list[int]:
    """``perm[i]`` is the port that input ``i`` moves to."""
    c = 1 << (_log2(n) // 2)
    r = n // c
    return [(i % c) * r + i // c for i in range(n)]


def _inverse(perm: Sequence[int]) -> list[int]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return inv


@dataclass(frozen=True)
class MuxConfig:
    n: int
    stages: tuple[tuple[int, ...], ...]
    transpose: bool = False

    def __post_init__(self):
        if len(self.stages) != _log2(self.n) or any(len(s) != self.n for s in self.stages):
            raise ValueError("mux control vectors do not match the port count")

    @classmethod
    def straight(cls, n: int, transpose: bool = False) -> MuxConfig:
        return cls(n, tuple((0,) * n for _ in range(_log2(n))), transpose)


@dataclass(frozen=True)
class SwitchConfig:
    n: int
    stages: tuple[tuple[SwitchMode, ...], ...]
    transpose: bool = False

    def __post_init__(self):
        if len(self.stages) != _log2(self.n) or any(len(s) != self.n // 2 for s in self.stages):
            raise ValueError("switch stage widths do not match the port count")

    @classmethod
    def passthrough(cls, n: int) -> SwitchConfig:
        return cls(n, tuple((SwitchMode.PASS,) * (n // 2) for _ in range(_log2(n))))


@dataclass(frozen=True)
class DistributionPattern:
    """``sources[i]`` is the input port feeding output ``i``; ``None`` means unused."""

    sources: tuple[int | None, ...]

    @property
    def n(self) -> int:
        return len(self.sources)

    def source(self, i: int) -> int | None:
        return self.sources[i]


@dataclass(frozen=True)
class ReductionPattern:
    """Groups of input ports, each summed onto its own destination port."""

    groups: tuple[tuple[tuple[int, ...], int], ...]
    n: int = 0

    def __post_init__(self):
        seen, dests = set(), set()
        for members, dest in self.groups:
            if not members:
                raise ValueError("empty reduction group")
            if seen & set(members):
                raise ValueError("reduction groups overlap")
            if dest in dests:
                raise ValueError("reduction destinations repeat")
            seen |= set(members)
            dests.add(dest)


def _switch_index(j: int, s: int) -> int:
    # switches of a stage are numbered by their left port with bit s removed
    low = j & ((1 << s) - 1)
    return ((j >> (s + 1)) << s) | low


def dist_simulate(c: MuxConfig, inputs: Sequence) -> list:
    vals = list(inputs)
    if len(vals) != c.n:
        raise ValueError("input length does not match the port count")
    if c.transpose:
        perm = transpose_perm(c.n)
        moved = [None] * c.n
        for i, v in enumerate(vals):
            moved[perm[i]] = v
        vals = moved
    for s, ctrl in enumerate(c.stages):
        bit = 1 << s
        vals = [vals[j ^ bit] if ctrl[j] else vals[j] for j in range(c.n)]
    return vals


def _route_dist(p: DistributionPattern, n: int, transpose: bool) -> MuxConfig | Unroutable:
    levels = _log2(n)
    perm = transpose_perm(n) if transpose else list(range(n))
    ctrl = [[None] * n for _ in range(levels)]
    for dest, src in enumerate(p.sources):
        if src is None:
            continue
        pos = perm[src]
        for s in range(levels):
            bit = 1 << s
            want = (dest ^ pos) & bit
            pos ^= want
            c = 1 if want else 0
            if ctrl[s][pos] is None:
                ctrl[s][pos] = c
            elif ctrl[s][pos] != c:
                return Unroutable(f"mux conflict at stage {s}, port {pos}")
    stages = tuple(tuple(0 if v is None else v for v in row) for row in ctrl)
    return MuxConfig(n, stages, transpose)


def dist_route(p: DistributionPattern, cfg: FabricConfig, transpose: bool | None = None) -> MuxConfig | Unroutable:
    """Route ``p``; tries the plain butterfly first, then the transpose layer.

    ``transpose`` pins the layer setting instead of trying both.
    """
    if cfg.kind != FabricKind.DISTRIBUTION:
        raise ValueError("dist_route needs a distribution fabric")
    if p.n != cfg.n:
        raise ValueError("pattern width does not match the fabric")
    options = (False, True) if transpose is None else (transpose,)
    result: MuxConfig | Unroutable = Unroutable("no option tried")
    for t in options:
        result = _route_dist(p, cfg.n, t)
        if result:
            return result
    return result


def red_simulate(c: SwitchConfig, inputs: Sequence) -> list:
    vals = list(inputs)
    if len(vals) != c.n:
        raise ValueError("input length does not match the port count")
    for s, modes in enumerate(c.stages):
        bit = 1 << s
        nxt = list(vals)
        for j in range(c.n):
            if j & bit:
                continue
            a, b = vals[j], vals[j | bit]
            mode = modes[_switch_index(j, s)]
            if mode == SwitchMode.PASS:
                nxt[j], nxt[j | bit] = a, b
            elif mode == SwitchMode.SWAP:
                nxt[j], nxt[j | bit] = b, a
            elif mode == SwitchMode.ADD_LEFT:
                nxt[j], nxt[j | bit] = a + b, IDLE
            else:
                nxt[j], nxt[j | bit] = IDLE, a + b
        vals = nxt
    if c.transpose:
        perm = transpose_perm(c.n)
        out = [None] * c.n
        for i, v in enumerate(vals):
            out[perm[i]] = v
        vals = out
    return vals


def _route_red(p: ReductionPattern, n: int, transpose: bool) -> SwitchConfig | Unroutable:
    levels = _log2(n)
    inv = _inverse(transpose_perm(n)) if transpose else list(range(n))
    target = {}
    items: dict[int, int] = {}  # port -> group index
    for g, (members, dest) in enumerate(p.groups):
        target[g] = inv[dest]
        for m in members:
            if not 0 <= m < n or not 0 <= dest < n:
                raise ValueError("port out of range")
            items[m] = g
    stages = []
    for s in range(levels):
        bit = 1 << s
        modes = [SwitchMode.PASS] * (n // 2)
        nxt: dict[int, int] = {}
        for j in range(n):
            if j & bit:
                continue
            left, right = items.get(j), items.get(j | bit)
            k = _switch_index(j, s)
            if left is None and right is None:
                continue
            if left is not None and right is not None:
                if left == right:
                    to_right = bool(target[left] & bit)
                    modes[k] = SwitchMode.ADD_RIGHT if to_right else SwitchMode.ADD_LEFT
                    nxt[j | bit if to_right else j] = left
                    continue
                lw, rw = bool(target[left] & bit), bool(target[right] & bit)
                if lw == rw:
                    return Unroutable(f"switch conflict at stage {s}, ports {j}/{j | bit}")
                modes[k] = SwitchMode.SWAP if lw else SwitchMode.PASS
                nxt[j | bit if lw else j] = left
                nxt[j if lw else j | bit] = right
                continue
            g = left if left is not None else right
            here_right = left is None
            to_right = bool(target[g] & bit)
            modes[k] = SwitchMode.PASS if here_right == to_right else SwitchMode.SWAP
            nxt[j | bit if to_right else j] = g
        items = nxt
        stages.append(tuple(modes))
    return SwitchConfig(n, tuple(stages), transpose)


def red_route(p: ReductionPattern, cfg: FabricConfig, transpose: bool | None = None) -> SwitchConfig | Unroutable:
    """Route group sums to their destinations; plain butterfly first."""
    if cfg.kind != FabricKind.REDUCTION:
        raise ValueError("red_route needs a reduction fabric")
    options = (False, True) if transpose is None else (transpose,)
    result: SwitchConfig | Unroutable = Unroutable("no option tried")
    for t in options:
        result = _route_red(p, cfg.n, t)
        if result:
            return result
    return result


def control_signals(bank_index: int, sel_vec: int, n: int = 16) -> tuple[int, ...]:
    """Per-stage mux bits steering bank ``bank_index``: bank bit XOR sel bit.

    Following these bits along the bank's path delivers it to port
    ``bank_index ^ controls``, which equals ``sel_vec``.
    """
    levels = _log2(n)
    if not 0 <= bank_index < n or not 0 <= sel_vec < n:
        raise ValueError("bank index and sel_vec must be below the port count")
    return tuple(((bank_index >> s) & 1) ^ ((sel_vec >> s) & 1) for s in range(levels))


def control_config(bank_index: int, sel_vec: int, n: int = 16) -> MuxConfig:
    """A mux configuration applying ``control_signals`` along the bank's path."""
    bits = control_signals(bank_index, sel_vec, n)
    stages = [[0] * n for _ in bits]
    pos = bank_index
    for s, b in enumerate(bits):
        pos ^= b << s
        stages[s][pos] = b
    return MuxConfig(n, tuple(tuple(r) for r in stages))


def brute_force_permutations(n: int, transpose: bool) -> set[tuple[int, ...]]:
    """All permutations reachable by some mux setting, found by enumeration.

    Injectivity is lost for good once two outputs copy one value, so
    non-injective partial settings are discarded after each stage.
    """
    levels = _log2(n)
    start = np.array(transpose_perm(n) if transpose else list(range(n)))
    # vals[k, port] = source carried; with transpose, source i sits at perm[i]
    vals = np.empty((1, n), dtype=np.int64)
    vals[0, start] = np.arange(n)
    ctrls = ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(bool)
    ports = np.arange(n)
    for s in range(levels):
        diag = vals[:, ports ^ (1 << s)]
        new = np.where(ctrls[None, :, :], diag[:, None, :], vals[:, None, :]).reshape(-1, n)
        srt = np.sort(new, axis=1)
        keep = (srt[:, 1:] != srt[:, :-1]).all(axis=1)
        vals = np.unique(new[keep], axis=0)
    return {tuple(int(v) for v in row) for row in vals}


def fabric_cost(n: int) -> dict[str, int]:
    """Switching-element counts, with crossbar and Benes references."""
    levels = _log2(n)
    return {
        "dist_muxes": n * (levels + 1),
        "red_adder_switches": (n // 2) * levels,
        "red_transpose_muxes": n,
        "crossbar_points": n * n,
        "benes_switches": n * (2 * levels - 1),
    }


def _json_scalar(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def route_trace(c: MuxConfig | SwitchConfig, inputs: Sequence) -> str:
    """JSON dump of per-stage port values for debugging."""

    def show(v):
        return None if v is IDLE else v

    stages = []
    if isinstance(c, MuxConfig):
        vals = list(inputs)
        if c.transpose:
            vals = dist_simulate(MuxConfig.straight(c.n, True), vals)
            stages.append({"stage": "transpose", "values": [show(v) for v in vals]})
        for s, ctrl in enumerate(c.stages):
            one = MuxConfig(c.n, tuple(ctrl if k == s else (0,) * c.n for k in range(len(c.stages))))
            vals = dist_simulate(one, vals)
            stages.append({"stage": s, "controls": list(ctrl), "values": [show(v) for v in vals]})
        kind = "distribution"
    else:
        vals = list(inputs)
        for s, modes in enumerate(c.stages):
            one = SwitchConfig(
                c.n,
                tuple(modes if k == s else (SwitchMode.PASS,) * (c.n // 2) for k in range(len(c.stages))),
            )
            vals = red_simulate(one, vals)
            stages.append({"stage": s, "modes": [m.value for m in modes], "values": [show(v) for v in vals]})
        if c.transpose:
            perm = transpose_perm(c.n)
            out = [None] * c.n
            for i, v in enumerate(vals):
                out[perm[i]] = v
            vals = out
            stages.append({"stage": "transpose", "values": [show(v) for v in vals]})
        kind = "reduction"
    return json.dumps(
        {"kind": kind, "n": c.n, "transpose": c.transpose, "stages": stages}, indent=2, default=_json_scalar
    )
