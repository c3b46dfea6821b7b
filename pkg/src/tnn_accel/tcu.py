"""Cycle-stepped simulator of a transposable systolic contraction engine (CE).

A CE tile computes C[i, j] = sum_k A[i, k] B[k, j].  The six modes bind the
GEMM onto the array as follows (rows x cols, streamed dim):

    WS  (IA=A streamed, IB=B stationary):  rows=k, cols=j, stream=i
    IS  (IA=B^T streamed, IB=A^T stationary): rows=k, cols=i, stream=j
    OS/IA=a:  rows=i, cols=j, stream=k
    OS/IA=b:  rows=j, cols=i, stream=k

WS/IS preload the stationary tile vertically (one tile row per cycle, P =
rows) or horizontally (one tile column per cycle, P = cols).  The preload
chain is valid-gated: a PE register only shifts once real data reaches it.
Each PE holds two stationary banks selected by tile parity, so the next
tile preloads while the current one streams.

Streamed values enter row r skewed by r cycles and move right; partial sums
move down and leave the bottom row, then pass an output de-skew delay of
``cols - c`` cycles on column c.  In OS both operands stream and PEs
accumulate locally; a column's results drain through a shadow chain once its
bottom PE finishes, then pass a de-skew delay of ``cols - 1 - c`` cycles.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np


class TileTooLarge(ValueError):
    pass


class PipelineHazard(RuntimeError):
    pass


class Stationarity(str, enum.Enum):
    WS = "WS"
    IS = "IS"
    OS = "OS"


class IbPath(str, enum.Enum):
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"


@dataclass(frozen=True)
class CeMode:
    stationarity: Stationarity
    ib_path: IbPath = IbPath.VERTICAL
    # which GEMM operand plays IA; only meaningful for OS
    ia: str = "a"

    def __post_init__(self):
        if self.stationarity == Stationarity.OS:
            if self.ib_path != IbPath.VERTICAL or self.ia not in ("a", "b"):
                raise ValueError("OS modes take ib_path=vertical and ia in {a, b}")
        elif self.ia != ("a" if self.stationarity == Stationarity.WS else "b"):
            raise ValueError("WS streams A and IS streams B")

    @property
    def name(self) -> str:
        if self.stationarity == Stationarity.OS:
            return f"OS/IA={self.ia}"
        return f"{self.stationarity.value}/{self.ib_path.value}"


CE_MODES = (
    CeMode(Stationarity.WS, IbPath.VERTICAL, "a"),
    CeMode(Stationarity.WS, IbPath.HORIZONTAL, "a"),
    CeMode(Stationarity.IS, IbPath.VERTICAL, "b"),
    CeMode(Stationarity.IS, IbPath.HORIZONTAL, "b"),
    CeMode(Stationarity.OS, IbPath.VERTICAL, "a"),
    CeMode(Stationarity.OS, IbPath.VERTICAL, "b"),
)


@dataclass
class CeTrace:
    cycles: int
    # activity[t, r, c] is 1 when PE (r, c) did a useful MAC in cycle t
    activity: np.ndarray
    # (cycle, tile, row index of C, col index of C)
    emissions: list[tuple[int, int, int, int]] = field(default_factory=list)
    mode: str = ""

    @property
    def busy_macs(self) -> int:
        return int(self.activity.sum())

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "cycles": self.cycles,
                "activity_per_cycle": [int(v) for v in self.activity.sum(axis=(1, 2))],
                "emissions": [list(e) for e in self.emissions],
            },
            indent=2,
        )


def ce_cycles(mode: CeMode, stream: int, tiles: int = 1, rows: int = 4, cols: int = 4) -> int:
    """Closed-form cycle count for ``tiles`` back-to-back tiles of equal stream length."""
    if stream < 1 or tiles < 1:
        raise ValueError("stream length and tile count must be positive")
    if mode.stationarity == Stationarity.OS:
        period = max(stream, rows)
        return (tiles - 1) * period + stream + 2 * rows + cols - 2
    p = rows if mode.ib_path == IbPath.VERTICAL else cols
    return p + (tiles - 1) * max(stream, p) + stream + rows + cols - 1


def ce_cycles_general(mode: CeMode, streams: list[int], rows: int = 4, cols: int = 4) -> int:
    """Closed form for a tile sequence with per-tile stream lengths."""
    if not streams:
        return 0
    if mode.stationarity == Stationarity.OS:
        return _os_starts(streams, rows)[-1] + streams[-1] + 2 * rows + cols - 2
    p = rows if mode.ib_path == IbPath.VERTICAL else cols
    start = p
    for t in streams[:-1]:
        start += max(t, p)
    return start + streams[-1] + rows + cols - 1


def _bind(mode: CeMode, a: np.ndarray, b: np.ndarray):
    """Return (stationary/IB tile as rows x cols, streamed tile as stream x rows, transposed_out)."""
    if mode.stationarity == Stationarity.WS:
        return b, a, False  # B is k x j, A is i x k
    if mode.stationarity == Stationarity.IS:
        return a.T, b.T, True  # A^T is k x i, B^T is j x k
    if mode.ia == "a":
        return a, b, False  # rows=i (A: i x k), cols=j (B: k x j)
    return b.T, a.T, True  # rows=j (B^T: j x k), cols=i (A^T: k x i)


def _check_tile(mode: CeMode, a, b, rows, cols):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible tile shapes {a.shape} and {b.shape}")
    i, k = a.shape
    j = b.shape[1]
    if mode.stationarity == Stationarity.WS:
        need = (k, j)
    elif mode.stationarity == Stationarity.IS:
        need = (k, i)
    elif mode.ia == "a":
        need = (i, j)
    else:
        need = (j, i)
    if need[0] > rows or need[1] > cols:
        raise TileTooLarge(f"{mode.name} needs a {need[0]}x{need[1]} array, CE is {rows}x{cols}")
    if min(i, k, j) < 1:
        raise ValueError("empty tile")


def _run_stationary(mode, tiles, rows, cols):
    """WS/IS engine.  ``tiles`` holds (ib k x n, ia s x k) pairs in array orientation."""
    vertical = mode.ib_path == IbPath.VERTICAL
    p = rows if vertical else cols
    starts, s = [], p
    for idx, (_, ia) in enumerate(tiles):
        starts.append(s)
        s += max(ia.shape[0], p)
    pre_starts = [0] + starts[:-1]
    horizon = starts[-1] + tiles[-1][1].shape[0] + rows + cols + 2

    # per PE, per bank: (tile id, writes seen, value)
    bank_tile = np.full((2, rows, cols), -1, dtype=np.int64)
    bank_val = [np.zeros((rows, cols), dtype=object) for _ in range(2)]
    bank_writes = np.zeros((2, rows, cols), dtype=np.int64)
    chain_valid = np.zeros((2, rows, cols), dtype=bool)

    a_reg = [[None] * cols for _ in range(rows)]  # (value, tile, stream idx)
    ps_reg = [[None] * cols for _ in range(rows)]  # (value, tile, stream idx)
    activity = np.zeros((horizon, rows, cols), dtype=np.int8)
    outputs = [np.zeros((ia.shape[0], ib.shape[1]), dtype=object) for ib, ia in tiles]
    pending = []  # (emit cycle, tile, stream idx, col, value)
    emissions = []
    last = -1

    def preload_step(cyc):
        for t, (ib, _) in enumerate(tiles):
            bank = t % 2
            base = pre_starts[t]
            if vertical:
                # column c receives entry q at base + c + q; entry q holds tile row p-1-q
                for c in range(cols):
                    q = cyc - base - c
                    if not 0 <= q < p:
                        continue
                    if q == 0:
                        chain_valid[bank, :, c] = False
                    kk = p - 1 - q
                    val = ib[kk, c] if kk < ib.shape[0] and c < ib.shape[1] else 0
                    for r in range(rows - 1, 0, -1):
                        if chain_valid[bank, r - 1, c]:
                            _write(bank, r, c, t, bank_val[bank][r - 1, c])
                            chain_valid[bank, r, c] = True
                    _write(bank, 0, c, t, val)
                    chain_valid[bank, 0, c] = True
            else:
                # row r receives entry q at base + r + q; entry q holds tile column p-1-q
                for r in range(rows):
                    q = cyc - base - r
                    if not 0 <= q < p:
                        continue
                    if q == 0:
                        chain_valid[bank, r, :] = False
                    cc = p - 1 - q
                    val = ib[r, cc] if r < ib.shape[0] and cc < ib.shape[1] else 0
                    for c in range(cols - 1, 0, -1):
                        if chain_valid[bank, r, c - 1]:
                            _write(bank, r, c, t, bank_val[bank][r, c - 1])
                            chain_valid[bank, r, c] = True
                    _write(bank, r, 0, t, val)
                    chain_valid[bank, r, 0] = True

    def _write(bank, r, c, t, val):
        if bank_tile[bank, r, c] != t:
            if bank_tile[bank, r, c] >= 0 and busy_until.get((bank_tile[bank, r, c], r, c), -1) > cur[0]:
                raise PipelineHazard(f"bank {bank} of PE ({r},{c}) overwritten while in use")
            bank_tile[bank, r, c] = t
            bank_writes[bank, r, c] = 0
        bank_val[bank][r, c] = val
        bank_writes[bank, r, c] += 1

    # last cycle each tile uses each PE, from the skewed schedule
    busy_until = {}
    for t, (_, ia) in enumerate(tiles):
        for r in range(rows):
            for c in range(cols):
                busy_until[(t, r, c)] = starts[t] + ia.shape[0] - 1 + r + c
    cur = [0]

    for cyc in range(horizon):
        cur[0] = cyc
        # shift operands first so the preload of this cycle cannot be read back
        new_a = [[None] * cols for _ in range(rows)]
        for r in range(rows):
            for c in range(cols - 1, 0, -1):
                new_a[r][c] = a_reg[r][c - 1]
            new_a[r][0] = None
            for t, (ib, ia) in enumerate(tiles):
                i = cyc - starts[t] - r
                if 0 <= i < ia.shape[0]:
                    val = ia[i, r] if r < ia.shape[1] else 0
                    new_a[r][0] = (val, t, i)
        new_ps = [[None] * cols for _ in range(rows)]
        for r in range(rows):
            for c in range(cols):
                item = new_a[r][c]
                if item is None:
                    continue
                val, t, i = item
                bank = t % 2
                need = rows - r if vertical else cols - c
                if bank_tile[bank, r, c] != t or bank_writes[bank, r, c] != need:
                    raise PipelineHazard(f"PE ({r},{c}) used tile {t} before its preload finished")
                above = ps_reg[r - 1][c] if r > 0 else (0, t, i)
                if above is None or above[1:] != (t, i):
                    raise PipelineHazard(f"psum misaligned at PE ({r},{c})")
                new_ps[r][c] = (above[0] + val * bank_val[bank][r, c], t, i)
                ib = tiles[t][0]
                if r < ib.shape[0] and c < ib.shape[1]:
                    activity[cyc, r, c] = 1
        for c in range(cols):
            out = new_ps[rows - 1][c]
            if out is not None:
                val, t, i = out
                if c < tiles[t][0].shape[1]:
                    pending.append((cyc + cols - c, t, i, c, val))
        preload_step(cyc)
        a_reg, ps_reg = new_a, new_ps
        for item in [e for e in pending if e[0] == cyc]:
            _, t, i, c, val = item
            outputs[t][i, c] = val
            emissions.append((cyc, t, i, c))
            last = max(last, cyc)
        pending = [e for e in pending if e[0] > cyc]
    return outputs, last + 1, activity[: last + 1], emissions


def _os_starts(streams, rows):
    # a tile's first local result may not land before the previous tile's shadow drains
    starts = [0]
    for prev, nxt in itertools.pairwise(streams):
        starts.append(starts[-1] + prev + max(0, rows - nxt))
    return starts


def _run_output_stationary(tiles, rows, cols):
    """OS engine.  ``tiles`` holds (ia rows x k, ib k x cols) pairs in array orientation."""
    starts = _os_starts([ia.shape[1] for ia, _ in tiles], rows)
    horizon = starts[-1] + tiles[-1][0].shape[1] + 2 * rows + cols + 2
    acc = np.zeros((rows, cols), dtype=object)
    acc_tile = np.full((rows, cols), -1, dtype=np.int64)
    # shadow chain per column: list of (value, tile, row) with position index
    shadow = [{} for _ in range(cols)]
    a_reg = [[None] * cols for _ in range(rows)]
    b_reg = [[None] * cols for _ in range(rows)]
    activity = np.zeros((horizon, rows, cols), dtype=np.int8)
    outputs = [np.zeros((ia.shape[0], ib.shape[1]), dtype=object) for ia, ib in tiles]
    emissions = []
    pending = []  # (emit cycle, tile, row, col, value) after column de-skew
    drain_start = {}
    for t, (ia, _) in enumerate(tiles):
        for c in range(cols):
            drain_start[(t, c)] = starts[t] + ia.shape[1] + rows - 1 + c
    last = -1
    for cyc in range(horizon):
        new_a = [[None] * cols for _ in range(rows)]
        new_b = [[None] * cols for _ in range(rows)]
        for r in range(rows):
            for c in range(cols - 1, 0, -1):
                new_a[r][c] = a_reg[r][c - 1]
        for c in range(cols):
            for r in range(rows - 1, 0, -1):
                new_b[r][c] = b_reg[r - 1][c]
        for t, (ia, ib) in enumerate(tiles):
            k_len = ia.shape[1]
            for r in range(rows):
                k = cyc - starts[t] - r
                if 0 <= k < k_len:
                    new_a[r][0] = (ia[r, k] if r < ia.shape[0] else 0, t, k)
            for c in range(cols):
                k = cyc - starts[t] - c
                if 0 <= k < k_len:
                    new_b[0][c] = (ib[k, c] if c < ib.shape[1] else 0, t, k)
        # drain shadows: each column shifts one value out of the bottom per cycle
        for c in range(cols):
            if not shadow[c]:
                continue
            moved = {}
            for pos, item in sorted(shadow[c].items(), reverse=True):
                if item[3] > cyc:
                    moved[pos] = item
                    continue
                if pos == rows - 1:
                    val, t, r, _ = item
                    ia, ib = tiles[t]
                    if r < ia.shape[0] and c < ib.shape[1]:
                        pending.append((cyc + cols - 1 - c, t, r, c, val))
                else:
                    if pos + 1 in moved:
                        raise PipelineHazard(f"shadow collision in column {c}")
                    moved[pos + 1] = item
            shadow[c] = moved
        for r in range(rows):
            for c in range(cols):
                ai, bi = new_a[r][c], new_b[r][c]
                if ai is None and bi is None:
                    continue
                if ai is None or bi is None or ai[1:] != bi[1:]:
                    raise PipelineHazard(f"operands misaligned at PE ({r},{c})")
                val_a, t, k = ai
                if acc_tile[r, c] != t:
                    acc[r, c] = 0
                    acc_tile[r, c] = t
                acc[r, c] = acc[r, c] + val_a * bi[0]
                ia, ib = tiles[t]
                if r < ia.shape[0] and c < ib.shape[1]:
                    activity[cyc, r, c] = 1
                if k == ia.shape[1] - 1:
                    # local result moves to the shadow chain; drains once the column is done
                    if r in shadow[c]:
                        raise PipelineHazard(f"shadow register ({r},{c}) still busy")
                    shadow[c][r] = (acc[r, c], t, r, drain_start[(t, c)])
        a_reg, b_reg = new_a, new_b
        for _, t, r, c, val in [e for e in pending if e[0] == cyc]:
            outputs[t][r, c] = val
            emissions.append((cyc, t, r, c))
            last = max(last, cyc)
        pending = [e for e in pending if e[0] > cyc]
    return outputs, last + 1, activity[: last + 1], emissions


def run_ce_tiles(
    mode: CeMode,
    tiles: list[tuple[np.ndarray, np.ndarray]],
    rows: int = 4,
    cols: int = 4,
) -> tuple[list[np.ndarray], CeTrace]:
    """Run back-to-back (A, B) tiles through one CE, double buffered."""
    if not tiles:
        raise ValueError("no tiles")
    bound = []
    for a, b in tiles:
        a, b = np.asarray(a), np.asarray(b)
        _check_tile(mode, a, b, rows, cols)
        bound.append(_bind(mode, a.astype(object), b.astype(object)))
    transposed = bound[0][2]
    if mode.stationarity == Stationarity.OS:
        outs, cycles, act, em = _run_output_stationary([(x, y) for x, y, _ in bound], rows, cols)
    else:
        outs, cycles, act, em = _run_stationary(mode, [(x, y) for x, y, _ in bound], rows, cols)
    results = []
    for (a, b), out in zip(tiles, outs):
        out = out.T if transposed else out
        dtype = np.result_type(np.asarray(a).dtype, np.asarray(b).dtype)
        results.append(out.astype(dtype))
    if transposed:
        em = [(cy, t, j, i) for cy, t, i, j in em]
    return results, CeTrace(cycles, act, em, mode.name)


def run_ce(mode: CeMode, tile_a, tile_b, rows: int = 4, cols: int = 4) -> tuple[np.ndarray, CeTrace]:
    """Single tile C = A @ B on one CE."""
    (out,), trace = run_ce_tiles(mode, [(tile_a, tile_b)], rows, cols)
    return out, trace


def ce_stream_length(mode: CeMode, i: int, k: int, j: int) -> int:
    if mode.stationarity == Stationarity.WS:
        return i
    if mode.stationarity == Stationarity.IS:
        return j
    return k


class UnroutablePattern(RuntimeError):
    pass


@dataclass
class TcuResult:
    result: np.ndarray
    cycles: int
    # psum vectors leaving CEs, one per output element per K chunk
    emissions: int = 0
    spill_factor: int = 1
    per_ce_cycles: list[int] = field(default_factory=list)
    stall: float = 1.0
    extra_dram_bytes: int = 0

    def __iter__(self):
        yield self.result
        yield self.cycles


def _chunks(ce_slice: tuple[int, int], temporal: int, group: int, width: int):
    """Index ranges of one array axis: temporal outer, array-sized chunks of the group inner."""
    lo = ce_slice[0]
    out = []
    for t in range(temporal):
        base = lo + t * group
        for s in range(0, group, width):
            out.append((base + s, base + min(s + width, group)))
    return out


def run_tcu(op, m, values, hw, workload=None) -> TcuResult:
    """Execute one contraction across all CEs of ``hw`` under mapping ``m``.

    ``op`` is a ``ContractionOp`` (with ``workload`` supplying dims) or an
    ``OpView``.  Operand blocks reach CEs through the distribution fabric,
    partial sums of a reduction dim split across CEs meet in the reduction
    fabric, and temporal K chunks accumulate in the accumulation unit.
    Unpacks as ``(result, cycles)``.
    """
    from .fabric import IDLE, FabricConfig, FabricKind, ReductionPattern, red_route, red_simulate
    from .perf_model import NoLegalMapping, OpView, cost_mapping, mapping_legal, op_view

    v = op if isinstance(op, OpView) else op_view(workload, op)
    if not mapping_legal(v, m, hw):
        raise NoLegalMapping(f"mapping {m.describe()} is not legal on {hw.name}")
    s = v.size_map
    nce, rows, cols = hw.num_ces, hw.ce_rows, hw.ce_cols
    letters = {"I": v.i_dims, "K": v.k_dims, "J": v.j_dims}
    st = m.mode.stationarity
    if st == Stationarity.WS:
        role = {"row": "K", "col": "J", "stream": "I"}
    elif st == Stationarity.IS:
        role = {"row": "K", "col": "I", "stream": "J"}
    elif m.mode.ia == "a":
        role = {"row": "I", "col": "J", "stream": "K"}
    else:
        role = {"row": "J", "col": "I", "stream": "K"}
    groups = {"row": tuple(m.row), "col": tuple(m.col), "stream": ()}
    ce_set = set(m.ce)

    order = {}
    for axis, letter in role.items():
        cls = letters[letter]
        ce = [d for d in m.ce if d in cls]
        grp = list(groups[axis])
        order[letter] = ce + [d for d in cls if d not in ce_set and d not in grp] + grp

    def as_matrix(name, dims, first, second):
        arr = np.asarray(values[name])
        keep = [d for d in dims if s[d] > 1]
        arr = arr.reshape([s[d] for d in keep])
        arr = np.transpose(arr, [keep.index(d) for d in first + second])
        return arr.reshape(math.prod(s[d] for d in first), math.prod(s[d] for d in second))

    am = as_matrix(v.a, v.a_dims, order["I"], order["K"])
    bm = as_matrix(v.b, v.b_dims, order["K"], order["J"])
    dtype = np.result_type(am.dtype, bm.dtype)

    e_size = math.prod(s[d] for d in m.ce)
    ce_letter = next((lt for lt in "IKJ" if ce_set and ce_set <= set(letters[lt])), None)
    extent = {lt: math.prod(s[d] for d in letters[lt]) for lt in "IKJ"}

    def slice_for(letter, e):
        if letter != ce_letter:
            return (0, extent[letter])
        sub = extent[letter] // e_size
        return (e * sub, (e + 1) * sub)

    def axis_chunks(axis, e):
        letter = role[axis]
        lo, hi = slice_for(letter, e)
        if axis == "stream":
            return [(lo, hi)]
        grp = math.prod(s[d] for d in groups[axis])
        temporal = (hi - lo) // grp
        return _chunks((lo, hi), temporal, grp, rows if axis == "row" else cols)

    def tile_plan(e):
        """GEMM (I, K, J) ranges of each tile a CE runs for ce index ``e``."""
        rch, cch, sch = axis_chunks("row", e), axis_chunks("col", e), axis_chunks("stream", e)
        if m.loop_order == "ia_outer":
            pairs = [(r, c) for c in cch for r in rch]
        else:
            pairs = [(r, c) for r in rch for c in cch]
        plan = []
        for r, c in pairs:
            for sr in sch:
                rng = {role["row"]: r, role["col"]: c, role["stream"]: sr}
                plan.append((rng["I"], rng["K"], rng["J"]))
        return plan

    rounds = max(1, -(-e_size // nce))
    ce_tiles: dict[int, list] = {}
    owners: list[list[tuple[int, int]]] = []
    for rnd in range(rounds):
        active = [(c, rnd * nce + c) for c in range(nce) if rnd * nce + c < max(e_size, 1)]
        owners.append(active)
        _distribute(v, m, hw, active, ce_letter, FabricConfig(nce) if nce > 1 else None)
        for c, e in active:
            ce_tiles.setdefault(c, []).extend((rnd, rng) for rng in tile_plan(e))

    per_ce: dict[int, dict[int, list]] = {}
    cycles_by_ce = []
    emissions = 0
    for c, items in sorted(ce_tiles.items()):
        tiles = [(am[i0:i1, k0:k1], bm[k0:k1, j0:j1]) for _, ((i0, i1), (k0, k1), (j0, j1)) in items]
        outs, trace = run_ce_tiles(m.mode, tiles, rows, cols)
        cycles_by_ce.append(trace.cycles)
        emissions += len(trace.emissions)
        for (rnd, rng), out in zip(items, outs):
            per_ce.setdefault(rnd, {}).setdefault(c, []).append((rng, out))

    acc = np.zeros((extent["I"], extent["J"]), dtype=object)
    reduce_k = ce_letter == "K"
    red_cfg = FabricConfig(nce, FabricKind.REDUCTION) if nce > 1 else None
    for rnd, active in enumerate(owners):
        # each CE's contribution for this round, as a full-size partial
        ports = []
        for c in range(nce):
            if c not in per_ce.get(rnd, {}):
                ports.append(IDLE)
                continue
            part = np.zeros_like(acc)
            for ((i0, i1), _, (j0, j1)), out in per_ce[rnd][c]:
                part[i0:i1, j0:j1] += out.astype(object)
            ports.append(part)
        members = tuple(c for c, _ in active)
        if red_cfg is None:
            summed = [ports[0]]
        else:
            if reduce_k:
                pattern = ReductionPattern(((members, members[0]),), nce)
            else:
                pattern = ReductionPattern(tuple(((c,), c) for c in members), nce)
            sw = red_route(pattern, red_cfg)
            if not sw:
                raise UnroutablePattern(f"reduction pattern for round {rnd}: {sw.reason}")
            outs = red_simulate(sw, ports)
            summed = [outs[dest] for _, dest in pattern.groups]
        for part in summed:
            acc = acc + part

    out = acc.astype(dtype)
    out = out.reshape([s[d] for d in order["I"] + order["J"]])
    have = order["I"] + order["J"]
    want = [d for d in v.out_dims if s[d] > 1]
    out = np.transpose(out, [have.index(d) for d in want]).reshape([s[d] for d in v.out_dims])

    stall = cost_mapping(v, m, hw).stall
    hops = (nce.bit_length() - 1) + 1 if nce > 1 else 0
    compute = max(cycles_by_ce) if cycles_by_ce else 0
    cycles = math.ceil(compute * stall) + 2 * hops
    out_elems = extent["I"] * extent["J"]
    return TcuResult(
        out,
        cycles,
        emissions=emissions,
        spill_factor=emissions // out_elems if out_elems else 0,
        per_ce_cycles=cycles_by_ce,
        stall=stall,
    )


def _distribute(v, m, hw, active, ce_letter, cfg) -> None:
    """Route each operand's blocks from banks to the active CEs and check delivery."""
    from .fabric import DistributionPattern, dist_route, dist_simulate

    if cfg is None:
        return
    n = cfg.n
    for operand, uses in (("a", "IK"), ("b", "KJ")):
        split = ce_letter is not None and ce_letter in uses
        want = [None] * n
        for c, e in active:
            want[c] = (operand, e if split else 0)
        if split or not hw.flexible_distribution:
            # distinct blocks, or replicated copies without multicast
            banks = [want[c] for c in range(n)]
            sources = tuple(c if want[c] is not None else None for c in range(n))
        else:
            banks = [(operand, 0)] + [None] * (n - 1)
            sources = tuple(0 if want[c] is not None else None for c in range(n))
        mux = dist_route(DistributionPattern(sources), cfg)
        if not mux:
            raise UnroutablePattern(f"distribution of operand {operand}: {mux.reason}")
        got = dist_simulate(mux, banks)
        for c, _ in active:
            if got[c] != want[c]:
                raise UnroutablePattern(f"CE {c} received {got[c]!r}, expected {want[c]!r}")
