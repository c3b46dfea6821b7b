"""Analytical performance model for contraction workloads on CE arrays.

Every pairwise contraction is a GEMM over three dim classes: dims only in
operand a (I), shared dims (K) and dims only in operand b (J).  A mapping
binds the classes to the CE array per ``CeMode`` and places dim groups on the
array rows, array columns and across CEs; everything else is a temporal loop.
Tile cycles come from the systolic closed form in ``tcu``.

Layouts are reduced to their innermost non-unit dim.  A streamed operand
must have its innermost dim in the row group, a stationary operand in the
group its preload path spans, and an op writes its result with the last
column-group dim innermost.  Conflicting layouts cost an off-chip reorder
unless the fabrics can absorb the permutation.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from functools import cache, cached_property, lru_cache

from .fabric import DistributionPattern, FabricConfig, dist_route, transpose_perm
from .hardware import HardwareConfig
from .tcu import CeMode, IbPath, Stationarity, ce_cycles
from .training import ContractionOp, TrainingWorkload


class NoLegalMapping(ValueError):
    pass


class CapacityExceeded(ValueError):
    pass


# flexible groups flatten at most this many dims onto one array axis
MAX_GROUP_DIMS = 2
NODE_BUDGET = 200_000


@dataclass(frozen=True)
class Policy:
    allow_absorb: bool = True
    # Pareto points kept per op before falling back to local search
    node_budget: int = NODE_BUDGET
    greedy: bool = False


@dataclass(frozen=True)
class Layout:
    """Dim order of a stored tensor, innermost last."""

    dims: tuple[int, ...]

    def innermost(self, sizes: dict[int, int]) -> int | None:
        for d in reversed(self.dims):
            if sizes.get(d, 1) > 1:
                return d
        return None


@dataclass(frozen=True)
class OpView:
    """Dims of one contraction, classified for mapping."""

    op_id: str
    phase: str
    a: str
    b: str
    result: str
    a_dims: tuple[int, ...]
    b_dims: tuple[int, ...]
    out_dims: tuple[int, ...]
    sizes: tuple[tuple[int, int], ...]

    @cached_property
    def size_map(self) -> dict[int, int]:
        return dict(self.sizes)

    def _nonunit(self, dims):
        s = self.size_map
        return tuple(d for d in dims if s[d] > 1)

    @cached_property
    def k_dims(self) -> tuple[int, ...]:
        bset = set(self.b_dims)
        return self._nonunit(d for d in self.a_dims if d in bset)

    @cached_property
    def i_dims(self) -> tuple[int, ...]:
        bset = set(self.b_dims)
        return self._nonunit(d for d in self.a_dims if d not in bset)

    @cached_property
    def j_dims(self) -> tuple[int, ...]:
        aset = set(self.a_dims)
        return self._nonunit(d for d in self.b_dims if d not in aset)

    def prod(self, dims: Iterable[int]) -> int:
        s = self.size_map
        return math.prod(s[d] for d in dims)

    @cached_property
    def macs(self) -> int:
        return self.prod(set(self.a_dims) | set(self.b_dims))

    @cached_property
    def _elems(self) -> dict[str, int]:
        return {"a": self.prod(self.a_dims), "b": self.prod(self.b_dims), "out": self.prod(self.out_dims)}

    def elems(self, which: str) -> int:
        return self._elems[which]


def op_view(w: TrainingWorkload, op: ContractionOp) -> OpView:
    dims = set(w.dims(op.operand_a)) | set(w.dims(op.operand_b))
    return OpView(
        op.id,
        op.phase.value,
        op.operand_a,
        op.operand_b,
        op.result,
        w.dims(op.operand_a),
        w.dims(op.operand_b),
        w.dims(op.result),
        tuple(sorted((d, w.size(d)) for d in dims)),
    )


@dataclass(frozen=True)
class Mapping:
    mode: CeMode
    row: tuple[int, ...] = ()
    col: tuple[int, ...] = ()
    ce: tuple[int, ...] = ()
    # which operand's tensor sits in the outer loop when operands spill
    loop_order: str = "ia_outer"

    def classes(self, v: OpView):
        """(row class, col class, stream class) for this mode."""
        st = self.mode.stationarity
        if st == Stationarity.WS:
            return v.k_dims, v.j_dims, v.i_dims
        if st == Stationarity.IS:
            return v.k_dims, v.i_dims, v.j_dims
        if self.mode.ia == "a":
            return v.i_dims, v.j_dims, v.k_dims
        return v.j_dims, v.i_dims, v.k_dims

    def ia_ib(self, v: OpView) -> tuple[str, str]:
        """Operand slots ('a'/'b') playing IA and IB."""
        st = self.mode.stationarity
        if st == Stationarity.WS or (st == Stationarity.OS and self.mode.ia == "a"):
            return "a", "b"
        return "b", "a"

    def ce_class(self, v: OpView) -> str | None:
        if not self.ce:
            return None
        row_c, col_c, stream_c = self.classes(v)
        for name, cls in (("row", row_c), ("col", col_c), ("stream", stream_c)):
            if set(self.ce) <= set(cls):
                return name
        raise NoLegalMapping("ce group mixes dim classes")

    def reduces_across_ces(self, v: OpView) -> bool:
        cls = self.ce_class(v)
        if cls is None:
            return False
        k = set(v.k_dims)
        return set(self.ce) <= k

    def temporal(self, v: OpView) -> tuple[int, ...]:
        row_c, col_c, _stream_c = self.classes(v)
        used = set(self.row) | set(self.col) | set(self.ce)
        return tuple(d for d in row_c + col_c if d not in used)

    def spatial(self, v: OpView) -> dict[int, tuple[str, int]]:
        s = v.size_map
        out = {}
        for axis, group in (("ce_row", self.row), ("ce_col", self.col), ("ce_index", self.ce)):
            for d in group:
                out[d] = (axis, s[d])
        return out

    def requirements(self, v: OpView) -> dict[str, frozenset | None]:
        """Required innermost-dim sets per operand slot; None means any layout."""
        ia, ib = self.ia_ib(v)
        req_ia = frozenset(self.row) or None
        if self.mode.stationarity != Stationarity.OS and self.mode.ib_path == IbPath.HORIZONTAL:
            req_ib = frozenset(self.row) or None
        else:
            req_ib = frozenset(self.col) or None
        return {ia: req_ia, ib: req_ib}

    def output_innermost(self) -> int | None:
        return self.col[-1] if self.col else None

    def layouts(self, v: OpView) -> dict[str, Layout]:
        """Concrete layouts satisfying this mapping's requirements."""
        req = self.requirements(v)
        out = {}
        for slot, dims in (("a", v.a_dims), ("b", v.b_dims)):
            want = req[slot]
            if want:
                last = [d for d in dims if d in want][-1]
                out[slot] = Layout(tuple(d for d in dims if d != last) + (last,))
            else:
                out[slot] = Layout(dims)
        inner = self.output_innermost()
        od = v.out_dims
        out["out"] = Layout(tuple(d for d in od if d != inner) + ((inner,) if inner is not None else ()))
        return out

    def describe(self) -> str:
        return f"{self.mode.name} row={list(self.row)} col={list(self.col)} ce={list(self.ce)} {self.loop_order}"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.name,
            "row": list(self.row),
            "col": list(self.col),
            "ce": list(self.ce),
            "loop_order": self.loop_order,
        }


@dataclass
class PerfReport:
    cycles: float = 0.0
    energy: float = 0.0
    frequency_hz: float = 1e9
    macs: int = 0
    peak_macs_per_cycle: int = 1
    traffic: dict = field(default_factory=lambda: {"dram": 0, "sram": 0, "noc": 0, "reg": 0})
    reorder_events: int = 0
    reorder_dram_bytes: int = 0
    absorbed_reorders: int = 0
    per_phase: dict = field(default_factory=dict)
    ops: list = field(default_factory=list)
    exact: bool = True

    @property
    def latency_s(self) -> float:
        return self.cycles / self.frequency_hz

    @property
    def edp(self) -> float:
        return self.latency_s * self.energy

    @property
    def utilization(self) -> float:
        if self.cycles == 0:
            return 0.0
        return self.macs / (self.peak_macs_per_cycle * self.cycles)

    def phase_utilization(self, phase: str) -> float:
        p = self.per_phase.get(phase)
        if not p or p["cycles"] == 0:
            return 0.0
        return p["macs"] / (self.peak_macs_per_cycle * p["cycles"])

    def metric(self, name: str) -> float:
        name = name.lower()
        if name == "latency":
            return self.latency_s
        if name == "energy":
            return self.energy
        if name == "edp":
            return self.edp
        if name == "flops":
            return 2.0 * self.macs
        if name == "cycles":
            return self.cycles
        raise ValueError(f"unknown metric {name!r}")

    def to_dict(self) -> dict:
        return {
            "cycles": self.cycles,
            "energy_pj": self.energy,
            "latency_s": self.latency_s,
            "edp": self.edp,
            "macs": self.macs,
            "utilization": self.utilization,
            "traffic": dict(sorted(self.traffic.items())),
            "reorder_events": self.reorder_events,
            "reorder_dram_bytes": self.reorder_dram_bytes,
            "absorbed_reorders": self.absorbed_reorders,
            "per_phase": {k: dict(sorted(v.items())) for k, v in sorted(self.per_phase.items())},
            "ops": self.ops,
            "exact": self.exact,
        }


def allowed_modes(hw: HardwareConfig) -> list[CeMode]:
    modes = []
    for st in (Stationarity.WS, Stationarity.IS):
        if st.value in hw.dataflow_modes:
            ia = "a" if st == Stationarity.WS else "b"
            modes.append(CeMode(st, IbPath.VERTICAL, ia))
            if hw.transposable_ce:
                modes.append(CeMode(st, IbPath.HORIZONTAL, ia))
    if "OS" in hw.dataflow_modes:
        modes.append(CeMode(Stationarity.OS, IbPath.VERTICAL, "a"))
        if hw.transposable_ce:
            modes.append(CeMode(Stationarity.OS, IbPath.VERTICAL, "b"))
    return modes


def _groups(cls: tuple[int, ...], flexible: bool, ordered_last: bool) -> list[tuple[int, ...]]:
    """Candidate dim groups for one array axis."""
    if not cls:
        return [()]
    if not flexible:
        return [(d,) for d in cls]
    out = [()]
    for k in range(1, min(MAX_GROUP_DIMS, len(cls)) + 1):
        for combo in itertools.combinations(cls, k):
            if ordered_last:
                for last in combo:
                    out.append(tuple(d for d in combo if d != last) + (last,))
            else:
                out.append(combo)
    return out


def _ce_groups(v: OpView, m_classes, row, col, hw: HardwareConfig) -> list[tuple[int, ...]]:
    if hw.num_ces == 1:
        return [()]
    row_c, col_c, stream_c = m_classes
    used = set(row) | set(col)
    k = set(v.k_dims)
    out = [()]
    for cls in (row_c, col_c, stream_c):
        free = tuple(d for d in cls if d not in used)
        if not free:
            continue
        if set(free) <= k and not hw.flexible_reduction:
            continue
        limit = MAX_GROUP_DIMS if hw.flexible_parallelism else 1
        for n in range(1, min(limit, len(free)) + 1):
            out.extend(itertools.combinations(free, n))
    return out


def enumerate_mappings(v: OpView, hw: HardwareConfig) -> list[Mapping]:
    """All legal mappings of ``v`` on ``hw``."""
    maps = []
    flexible = hw.flexible_parallelism
    fits = _fits_on_chip(v, hw)
    orders = ("ia_outer",) if fits else ("ia_outer", "ib_outer")
    for mode in allowed_modes(hw):
        probe = Mapping(mode)
        classes = probe.classes(v)
        row_c, col_c, _ = classes
        for row in _groups(row_c, flexible, False):
            for col in _groups(col_c, flexible, True):
                for ce in _ce_groups(v, classes, row, col, hw):
                    for order in orders:
                        maps.append(Mapping(mode, row, col, ce, order))
    if not maps:
        raise NoLegalMapping(f"no mapping for op {v.op_id}")
    return maps


def _fits_on_chip(v: OpView, hw: HardwareConfig) -> bool:
    total = (v.elems("a") + v.elems("b") + v.elems("out")) * hw.elem_bytes
    return total <= hw.unified_mem_bytes


@dataclass(frozen=True)
class OpCost:
    cycles: int
    energy: float
    compute_cycles: int
    dram_bytes: int
    sram: int
    noc: int
    reg: int
    stream_len: int
    tiles: int
    stall: float


def _log2(n: int) -> int:
    return max(n.bit_length() - 1, 0)


def cost_mapping(v: OpView, m: Mapping, hw: HardwareConfig) -> OpCost:
    rows, cols, nce = hw.ce_rows, hw.ce_cols, hw.num_ces
    row_c, col_c, stream_c = m.classes(v)
    st = m.mode.stationarity
    r_size, c_size, e_size = v.prod(m.row), v.prod(m.col), v.prod(m.ce)
    tiles_r, tiles_c = -(-r_size // rows), -(-c_size // cols)
    ce_cls = m.ce_class(v)
    used = set(m.row) | set(m.col) | set(m.ce)
    row_t = v.prod(d for d in row_c if d not in used)
    col_t = v.prod(d for d in col_c if d not in used)
    e_per = -(-e_size // nce)
    active = min(e_size, nce)
    stream = v.prod(d for d in stream_c if d not in used)
    n = tiles_r * tiles_c * row_t * col_t
    if ce_cls == "stream":
        stream *= e_per
    else:
        n *= e_per
    chunks = 1
    if st != Stationarity.OS:
        cap = max(hw.accum_mem_bytes // (nce * hw.psum_bytes * cols), 1)
        if stream > cap:
            chunks = -(-stream // cap)
            stream = -(-stream // chunks)
            n *= chunks
    compute = ce_cycles(m.mode, stream, n, rows, cols)

    flex = hw.flexible_distribution
    r_used, c_used = min(r_size, rows), min(c_size, cols)
    if st == Stationarity.OS:
        ia_rate, ib_rate = r_used, c_used
        ia_shared = ce_cls == "col"
        ib_shared = ce_cls == "row"
    else:
        p = rows if m.mode.ib_path == IbPath.VERTICAL else cols
        ia_rate = r_used
        ib_rate = r_used * c_used / max(stream, p)
        ia_shared = ce_cls == "col"
        ib_shared = ce_cls == "stream"
    demand = ia_rate * (1 if (ia_shared and flex) else active) + ib_rate * (1 if (ib_shared and flex) else active)
    stall = max(1.0, demand / hw.fetch_elems_per_cycle)
    hops = _log2(nce) + 1 if nce > 1 else 0
    busy = math.ceil(compute * stall) + 2 * hops

    ia, ib = m.ia_ib(v)
    eb = hw.elem_bytes
    a_bytes, b_bytes, out_bytes = v.elems("a") * eb, v.elems("b") * eb, v.elems("out") * eb
    ref = {"a": 1, "b": 1}
    if not _fits_on_chip(v, hw):
        half = hw.unified_mem_bytes // 2
        sizes = {"a": a_bytes, "b": b_bytes}
        outer, inner = (ia, ib) if m.loop_order == "ia_outer" else (ib, ia)
        ref[inner] = -(-sizes[outer] // half)
    dram_read = a_bytes * ref["a"] + b_bytes * ref["b"]
    dram_bytes = dram_read + out_bytes
    dram_cycles = math.ceil(dram_bytes / hw.dram_bytes_per_cycle)
    cycles = max(busy, dram_cycles)

    def share(shared: bool) -> int:
        # copies fetched from SRAM when CEs split the reuse dims
        return e_per if (shared and flex) else (e_size if shared else 1)

    ia_elems, ib_elems = v.elems(ia), v.elems(ib)
    macs = v.macs
    if st == Stationarity.OS:
        ia_reads = ia_elems * tiles_c * col_t * share(ce_cls == "col")
        ib_reads = ib_elems * tiles_r * row_t * share(ce_cls == "row")
        k_parts = e_per if ce_cls == "stream" else 1
    else:
        ia_reads = ia_elems * tiles_c * col_t * share(ce_cls == "col")
        ib_reads = ib_elems * chunks * share(ce_cls == "stream")
        k_parts = tiles_r * row_t * (e_per if ce_cls == "row" else 1)
    out_elems = v.elems("out")
    out_writes = out_elems * k_parts
    psum_reads = out_elems * (k_parts - 1)
    fill = dram_read // eb
    sram = ia_reads + ib_reads + psum_reads + out_writes + fill
    noc = (ia_reads + ib_reads) * hops
    if m.reduces_across_ces(v):
        noc += out_elems * e_size * hops
    reg = 3 * macs
    et = hw.energy_table
    energy = (
        et["mac"] * macs
        + et["reg"] * reg
        + et["sram_read"] * (ia_reads + ib_reads + psum_reads)
        + et["sram_write"] * (out_writes + fill)
        + et["dram_read"] * (dram_read / eb)
        + et["dram_write"] * (out_bytes / eb)
        + et["noc_hop"] * noc
    )
    return OpCost(cycles, energy, compute, dram_bytes, sram, noc, reg, stream, n, stall)


def _report_from_cost(v: OpView, c: OpCost, hw: HardwareConfig) -> PerfReport:
    return PerfReport(
        cycles=c.cycles,
        energy=c.energy,
        frequency_hz=hw.frequency_hz,
        macs=v.macs,
        peak_macs_per_cycle=hw.total_macs,
        traffic={"dram": c.dram_bytes // hw.elem_bytes, "sram": c.sram, "noc": c.noc, "reg": c.reg},
        per_phase={v.phase: {"cycles": c.cycles, "energy": c.energy, "macs": v.macs}},
    )


def mapping_legal(v: OpView, m: Mapping, hw: HardwareConfig) -> bool:
    if m.mode.stationarity.value not in hw.dataflow_modes:
        return False
    if not hw.transposable_ce and (
        m.mode.ib_path == IbPath.HORIZONTAL or m.mode.ia == "b" and m.mode.stationarity == Stationarity.OS
    ):
        return False
    row_c, col_c, _ = m.classes(v)
    if not set(m.row) <= set(row_c) or not set(m.col) <= set(col_c):
        return False
    if set(m.ce) & (set(m.row) | set(m.col)):
        return False
    try:
        m.ce_class(v)
    except NoLegalMapping:
        return False
    if m.ce and hw.num_ces == 1:
        return False
    if m.reduces_across_ces(v) and not hw.flexible_reduction:
        return False
    grouped = len(m.row) != min(1, len(row_c)) or len(m.col) != min(1, len(col_c)) or len(m.ce) > 1
    return hw.flexible_parallelism or not grouped


def evaluate_mapping(v: OpView, m: Mapping, hw: HardwareConfig) -> PerfReport:
    """Cycles, energy and traffic of one op under one mapping."""
    if not mapping_legal(v, m, hw):
        raise NoLegalMapping(f"mapping {m.describe()} is not legal on {hw.name}")
    _check_capacity(v, m, hw)
    return _report_from_cost(v, cost_mapping(v, m, hw), hw)


def _check_capacity(v: OpView, m: Mapping, hw: HardwareConfig) -> None:
    # double-buffered stationary tiles for every CE
    if m.mode.stationarity == Stationarity.OS:
        return
    tile = min(v.prod(m.row), hw.ce_rows) * min(v.prod(m.col), hw.ce_cols)
    if 2 * tile * hw.elem_bytes * hw.num_ces > hw.unified_mem_bytes:
        raise CapacityExceeded(f"stationary tiles of {m.ia_ib(v)[1]} do not fit on chip")


@cache
def fabric_absorbs(ports: int) -> bool:
    """Whether the distribution fabric realizes the corner-turn permutation."""
    if ports < 2:
        return False
    perm = transpose_perm(ports)
    inv = [0] * ports
    for i, p in enumerate(perm):
        inv[p] = i
    return bool(dist_route(DistributionPattern(tuple(inv)), FabricConfig(ports)))


def _absorbs(hw: HardwareConfig, policy: Policy) -> bool:
    return policy.allow_absorb and hw.absorbs_layouts and fabric_absorbs(max(hw.num_ces, hw.mem_banks))


def layout_reorder_cost(
    elems: int,
    src: Layout,
    dst: Layout,
    hw: HardwareConfig,
    policy: Policy | None = None,
    sizes: dict[int, int] | None = None,
) -> PerfReport:
    """Cost of turning ``src`` into ``dst``; zero when equal or absorbed by the fabrics."""
    if set(src.dims) != set(dst.dims):
        raise ValueError("layouts cover different dims")
    zero = PerfReport(frequency_hz=hw.frequency_hz, peak_macs_per_cycle=hw.total_macs)
    same = src.dims == dst.dims
    if sizes is not None:
        same = same or src.innermost(sizes) == dst.innermost(sizes)
    if same:
        return zero
    if _absorbs(hw, policy or Policy()):
        zero.absorbed_reorders = 1
        return zero
    return _reorder_report(elems, hw, 1)


def _reorder_report(elems: int, hw: HardwareConfig, events: int) -> PerfReport:
    nbytes = 2 * elems * hw.elem_bytes * events
    et = hw.energy_table
    return PerfReport(
        cycles=math.ceil(nbytes / hw.dram_bytes_per_cycle),
        energy=elems * events * (et["dram_write"] + et["dram_read"]),
        frequency_hz=hw.frequency_hz,
        peak_macs_per_cycle=hw.total_macs,
        traffic={"dram": 2 * elems * events, "sram": 0, "noc": 0, "reg": 0},
        reorder_events=events,
        reorder_dram_bytes=nbytes,
    )


def min_hitting_set(sets: list[frozenset]) -> int:
    """Fewest dims meeting every set (number of extra layouts needed)."""
    sets = [s for s in sets if s]
    if not sets:
        return 0
    universe = sorted(set().union(*sets))
    for k in range(1, len(universe) + 1):
        for combo in itertools.combinations(universe, k):
            cs = set(combo)
            if all(s & cs for s in sets):
                return k
    return len(sets)


@dataclass(frozen=True)
class _Option:
    cycles: int
    energy: float
    req: tuple  # ((slot, frozenset|None), ...)
    out: int | None
    mapping: Mapping
    cost: OpCost


def _canonical(v: OpView):
    """Relabel dims by first appearance so equal-shaped ops share cache entries."""
    order = list(dict.fromkeys(v.a_dims + v.b_dims))
    rel = {d: k for k, d in enumerate(order)}
    s = v.size_map
    key = (
        tuple(rel[d] for d in v.a_dims),
        tuple(rel[d] for d in v.b_dims),
        tuple(rel[d] for d in v.out_dims),
        tuple(s[d] for d in order),
    )
    canon = OpView(
        "canon",
        v.phase,
        "a",
        "b",
        "out",
        key[0],
        key[1],
        key[2],
        tuple((k, s[d]) for k, d in enumerate(order)),
    )
    return key, canon, order


@lru_cache(maxsize=4096)
def _canonical_options(key, canon: OpView, hw: HardwareConfig, collapse: bool) -> tuple[_Option, ...]:
    best: dict = {}
    for m in enumerate_mappings(canon, hw):
        try:
            if not mapping_legal(canon, m, hw):
                continue
            _check_capacity(canon, m, hw)
            c = cost_mapping(canon, m, hw)
        except (NoLegalMapping, CapacityExceeded):
            continue
        req = m.requirements(canon)
        sig = () if collapse else (req.get("a"), req.get("b"), m.output_innermost())
        best.setdefault(sig, []).append(
            _Option(c.cycles, c.energy, (("a", req.get("a")), ("b", req.get("b"))), m.output_innermost(), m, c)
        )
    fronts = []
    for group in best.values():
        group.sort(key=lambda o: (o.cycles, o.energy, o.mapping.describe()))
        front = []
        for o in group:
            if not front or o.energy < front[-1].energy:
                front.append(o)
        fronts.extend(front)
    fronts.sort(key=lambda o: (o.cycles, o.energy, o.mapping.describe()))
    opts = []
    for o in fronts:
        if not any(_dominates(p, o) for p in opts):
            opts.append(o)
    if not opts:
        raise NoLegalMapping("no legal mapping")
    opts.sort(key=lambda o: (o.cycles * o.energy, o.cycles, o.mapping.describe()))
    return tuple(opts)


# producer not yet assigned in the layout search
_UNSET = -1


def _minimal(reqs: frozenset, have) -> frozenset:
    """Requirement sets still binding: unmet by ``have`` and not implied by a smaller set."""
    live = [r for r in reqs if have is None or have == _UNSET or have not in r]
    return frozenset(r for r in live if not any(q < r for q in live))


def _weaker(r1, r2) -> bool:
    """Requirement r1 is met whenever r2 is."""
    return r1 is None or (r2 is not None and r1 >= r2)


def _dominates(p: _Option, o: _Option) -> bool:
    if p.cycles > o.cycles or p.energy > o.energy:
        return False
    if not all(_weaker(rp, ro) for (_, rp), (_, ro) in zip(p.req, o.req)):
        return False
    return p.out is None or p.out == o.out


def _relabel_mapping(m: Mapping, order: list[int]) -> Mapping:
    return Mapping(
        m.mode,
        tuple(order[d] for d in m.row),
        tuple(order[d] for d in m.col),
        tuple(order[d] for d in m.ce),
        m.loop_order,
    )


def op_options(v: OpView, hw: HardwareConfig, collapse: bool = False) -> list[_Option]:
    key, canon, order = _canonical(v)
    out = []
    for o in _canonical_options(key, canon, hw, collapse):
        req = tuple(
            (v.a if slot == "a" else v.b, None if s is None else frozenset(order[d] for d in s)) for slot, s in o.req
        )
        out.append(
            _Option(
                o.cycles,
                o.energy,
                req,
                None if o.out is None else order[o.out],
                _relabel_mapping(o.mapping, order),
                o.cost,
            )
        )
    return out


def best_mapping(v: OpView, hw: HardwareConfig) -> tuple[Mapping, PerfReport]:
    """Locally best mapping by per-op EDP."""
    opts = op_options(v, hw, collapse=True)
    best = min(opts, key=lambda o: (o.cycles * o.energy, o.cycles, o.mapping.describe()))
    return best.mapping, _report_from_cost(v, best.cost, hw)


class _Problem:
    def __init__(self, w: TrainingWorkload, hw: HardwareConfig, policy: Policy):
        self.w, self.hw, self.policy = w, hw, policy
        self.views = [op_view(w, op) for op in w.ops]
        self.absorb = _absorbs(hw, policy)
        self.options = [op_options(v, hw, collapse=self.absorb) for v in self.views]
        sizes = {d: dim.size for d, dim in w.dim_table.items()}
        self.sizes = sizes
        producer = {op.result: k for k, op in enumerate(w.ops)}
        consumers: dict[str, list[int]] = {}
        for k, op in enumerate(w.ops):
            for t in (op.operand_a, op.operand_b):
                consumers.setdefault(t, []).append(k)
        self.tensors = []
        close_at: dict[int, list[int]] = {}
        for t, cons in consumers.items():
            prod = producer.get(t)
            natural = None if w.tensors[t].kind == "weight" else Layout(w.dims(t)).innermost(sizes)
            idx = len(self.tensors)
            self.tensors.append((t, prod, cons, natural, w.elems(t)))
            close_at.setdefault(max([prod if prod is not None else -1] + cons), []).append(idx)
        self.close_at = close_at
        self.touch = [
            tuple(sorted(set(cons) | ({prod} if prod is not None else set()))) for _, prod, cons, _, _ in self.tensors
        ]
        self._events: dict[tuple, int] = {}
        n = len(self.views)
        self.min_c = [min(o.cycles for o in opts) for opts in self.options]
        self.min_e = [min(o.energy for o in opts) for opts in self.options]
        self.rest_c = [sum(self.min_c[k:]) for k in range(n + 1)]
        self.rest_e = [sum(self.min_e[k:]) for k in range(n + 1)]

    def tensor_events(self, idx: int, choice) -> int:
        t, prod, cons, natural, _ = self.tensors[idx]
        have = natural if prod is None else self.options[prod][choice[prod]].out
        reqs = frozenset(r for k in cons if (r := dict(self.options[k][choice[k]].req).get(t)) is not None)
        return self.events(have, reqs)

    def events(self, have, reqs: frozenset) -> int:
        key = (have, reqs)
        hit = self._events.get(key)
        if hit is None:
            if have is None:
                # one layout is free: stored weights or an unconstrained producer
                hit = max(0, min_hitting_set(list(reqs)) - 1)
            else:
                hit = min_hitting_set([r for r in reqs if have not in r])
            self._events[key] = hit
        return hit

    def reorder_cost(self, idx: int, ev: int) -> tuple[int, float]:
        if ev == 0 or self.absorb:
            return 0, 0.0
        rep = _reorder_report(self.tensors[idx][4], self.hw, ev)
        return rep.cycles, rep.energy

    def tensor_cost(self, idx: int, choice) -> tuple[int, float, int]:
        ev = self.tensor_events(idx, choice)
        return (*self.reorder_cost(idx, ev), ev)

    def total(self, choice: list[int]) -> tuple[float, float]:
        c = sum(self.options[k][i].cycles for k, i in enumerate(choice))
        e = sum(self.options[k][i].energy for k, i in enumerate(choice))
        for idx in range(len(self.tensors)):
            dc, de, _ = self.tensor_cost(idx, choice)
            c += dc
            e += de
        return c, e

    def local_search(self, choice: list[int]) -> list[int]:
        best = self.total(choice)
        improved = True
        while improved:
            improved = False
            for k in range(len(choice)):
                for i in range(len(self.options[k])):
                    if i == choice[k]:
                        continue
                    trial = list(choice)
                    trial[k] = i
                    c, e = self.total(trial)
                    if c * e < best[0] * best[1]:
                        choice, best, improved = trial, (c, e), True
        return choice

    def greedy(self) -> list[int]:
        choice: list[int] = []
        c_acc = e_acc = 0.0
        for k, opts in enumerate(self.options):
            scored = []
            for i, o in enumerate(opts):
                trial = choice + [i]
                dc = de = 0.0
                for idx in self.close_at.get(k, []):
                    tc, te, _ = self.tensor_cost(idx, trial)
                    dc += tc
                    de += te
                c, e = c_acc + o.cycles + dc, e_acc + o.energy + de
                scored.append(((c + self.rest_c[k + 1]) * (e + self.rest_e[k + 1]), i, c, e))
            _, i, c_acc, e_acc = min(scored)
            choice.append(i)
        return choice

    def elimination_order(self) -> list[int]:
        """Op order keeping few tensors open; greedy on the resulting frontier size."""
        n = len(self.options)
        touching = self._touching()
        remaining = {idx: len(ops) for idx, ops in enumerate(self.touch)}
        opened: set[int] = set()
        order: list[int] = []
        left = set(range(n))
        while left:

            def score(k):
                after = set(opened)
                for idx in touching.get(k, []):
                    after.add(idx)
                    if remaining[idx] == 1:
                        after.discard(idx)
                return (len(after), k)

            k = min(left, key=score)
            left.remove(k)
            order.append(k)
            for idx in touching.get(k, []):
                remaining[idx] -= 1
                opened.add(idx)
                if remaining[idx] == 0:
                    opened.discard(idx)
        return order

    def _touching(self) -> dict[int, list[int]]:
        touching: dict[int, list[int]] = {}
        for idx, ops in enumerate(self.touch):
            for k in ops:
                touching.setdefault(k, []).append(idx)
        return touching

    def exact(self) -> list[int] | None:
        """Pareto dynamic program over ops; states hold layout facts of open tensors.

        EDP grows with both total cycles and total energy, so the optimum is
        on the Pareto front of (cycles, energy) totals.  Partial points whose
        bound exceeds a local-search incumbent are dropped.  Returns None when
        the fronts outgrow the node budget.
        """
        touching = self._touching()
        order = self.elimination_order()
        pos = {k: p for p, k in enumerate(order)}
        closes: dict[int, list[int]] = {}
        for idx, ops in enumerate(self.touch):
            closes.setdefault(max(pos[k] for k in ops), []).append(idx)
        min_c = [self.min_c[k] for k in order]
        min_e = [self.min_e[k] for k in order]
        rest_c = [sum(min_c[p:]) for p in range(len(order) + 1)]
        rest_e = [sum(min_e[p:]) for p in range(len(order) + 1)]

        inc = self.local_search(self.greedy())
        ic, ie = self.total(inc)
        bound = ic * ie * (1 + 1e-9)
        states: dict[tuple, list] = {(): [(0, 0.0, ())]}
        for p, k in enumerate(order):
            tail_c, tail_e = rest_c[p + 1], rest_e[p + 1]
            nxt: dict[tuple, list] = {}
            for state, front in states.items():
                base = dict(state)
                for i, o in enumerate(self.options[k]):
                    upd = dict(base)
                    reqs = dict(o.req)
                    for idx in touching.get(k, []):
                        t, prod, _, natural, _ = self.tensors[idx]
                        start = natural if prod is None else _UNSET
                        have, seen = upd.get(idx, (start, frozenset()))
                        if prod == k:
                            have = o.out
                            seen = _minimal(seen, have)
                        elif reqs.get(t) is not None:
                            seen = _minimal(seen | {reqs[t]}, have)
                        upd[idx] = (have, seen)
                    dc, de = o.cycles, o.energy
                    for idx in closes.get(p, []):
                        have, seen = upd.pop(idx)
                        xc, xe = self.reorder_cost(idx, self.events(have, seen))
                        dc += xc
                        de += xe
                    key = tuple(sorted(upd.items(), key=lambda kv: kv[0]))
                    bucket = nxt.setdefault(key, [])
                    bucket.extend(
                        (c + dc, e + de, ch + (i,))
                        for c, e, ch in front
                        if (c + dc + tail_c) * (e + de + tail_e) <= bound
                    )
            size = 0
            for key in list(nxt):
                pts = sorted(nxt[key])
                kept = []
                for pt in pts:
                    if not kept or pt[1] < kept[-1][1]:
                        kept.append(pt)
                if kept:
                    nxt[key] = kept
                    size += len(kept)
                else:
                    del nxt[key]
            if size > self.policy.node_budget:
                return None
            states = nxt
        finals = [(c * e, c, ch) for front in states.values() for c, e, ch in front]
        if not finals:
            return inc
        ch = min(finals)[2]
        choice = [0] * len(order)
        for p, k in enumerate(order):
            choice[k] = ch[p]
        return choice

    def solve(self) -> tuple[list[int], bool]:
        if not self.policy.greedy:
            choice = self.exact()
            if choice is not None:
                return choice, True
        return self.local_search(self.greedy()), False


def evaluate_workload(w: TrainingWorkload, hw: HardwareConfig, policy: Policy | None = None) -> PerfReport:
    """Jointly choose per-op mappings and layouts minimizing workload EDP."""
    policy = policy or Policy()
    if not w.ops:
        return PerfReport(frequency_hz=hw.frequency_hz, peak_macs_per_cycle=hw.total_macs)
    prob = _Problem(w, hw, policy)
    choice, exact = prob.solve()
    rep = PerfReport(frequency_hz=hw.frequency_hz, peak_macs_per_cycle=hw.total_macs, exact=exact)
    phases: dict[str, dict] = {}
    for k, (v, i) in enumerate(zip(prob.views, choice)):
        o = prob.options[k][i]
        r = _report_from_cost(v, o.cost, hw)
        _accumulate(rep, r)
        ph = phases.setdefault(v.phase, {"cycles": 0, "energy": 0.0, "macs": 0})
        ph["cycles"] += r.cycles
        ph["energy"] += r.energy
        ph["macs"] += r.macs
        rep.ops.append(
            {
                "op": v.op_id,
                "phase": v.phase,
                "mapping": o.mapping.to_dict(),
                "cycles": r.cycles,
                "energy_pj": r.energy,
                "utilization": r.utilization,
            }
        )
    reorder = phases.setdefault("reorder", {"cycles": 0, "energy": 0.0, "macs": 0})
    for idx in range(len(prob.tensors)):
        ev = prob.tensor_events(idx, choice)
        if not ev:
            continue
        if prob.absorb:
            rep.absorbed_reorders += ev
            continue
        r = _reorder_report(prob.tensors[idx][4], hw, ev)
        _accumulate(rep, r)
        rep.reorder_events += r.reorder_events
        rep.reorder_dram_bytes += r.reorder_dram_bytes
        reorder["cycles"] += r.cycles
        reorder["energy"] += r.energy
    if w.repeat > 1:
        _scale(rep, phases, w)
    rep.per_phase = phases
    return rep


def _accumulate(rep: PerfReport, r: PerfReport) -> None:
    rep.cycles += r.cycles
    rep.energy += r.energy
    rep.macs += r.macs
    for k, val in r.traffic.items():
        rep.traffic[k] = rep.traffic.get(k, 0) + val


def _scale(rep: PerfReport, phases: dict, w: TrainingWorkload) -> None:
    k = w.repeat
    rep.cycles *= k
    rep.energy *= k
    rep.macs *= k
    rep.traffic = {name: val * k for name, val in rep.traffic.items()}
    rep.reorder_events *= k
    rep.reorder_dram_bytes *= k
    rep.absorbed_reorders *= k
    for ph in phases.values():
        for name in ph:
            ph[name] *= k
    for op in rep.ops:
        op["cycles"] *= k
        op["energy_pj"] *= k
