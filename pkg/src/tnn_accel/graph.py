"""Tensor-network graphs for tensorized layers.

A graph holds tensor nodes whose dimensions are shared by identity: a dim
referenced by two nodes is a contraction edge, a dim referenced by one node
is a dangling (output) edge.  Graphs are treated as immutable values; every
contraction returns a new graph.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class GraphError(ValueError):
    pass


class RankMismatch(GraphError):
    pass


class HyperEdge(GraphError):
    pass


class EmptySpec(GraphError):
    pass


class DeadNode(GraphError):
    pass


class InvalidSequence(GraphError):
    pass


class ShapeMismatch(GraphError):
    pass


class NodeKind(str, enum.Enum):
    INPUT = "Input"
    WEIGHT = "WeightCore"
    TRANSFER = "TransferCore"
    INTERMEDIATE = "Intermediate"
    OUTPUT = "Output"


WEIGHT_KINDS = (NodeKind.WEIGHT, NodeKind.TRANSFER)


@dataclass(frozen=True)
class Dim:
    id: int
    size: int
    label: str = ""


@dataclass(frozen=True)
class TensorNode:
    id: str
    dims: tuple[int, ...]
    kind: NodeKind = NodeKind.INTERMEDIATE


@dataclass(frozen=True)
class StepCost:
    macs: int
    left_elems: int
    right_elems: int
    result_elems: int


@dataclass(frozen=True)
class ContractionStep:
    left: str
    right: str
    result: str


@dataclass(frozen=True)
class ContractionSequence:
    steps: tuple[ContractionStep, ...] = ()

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def pairs(self) -> list[tuple[str, str]]:
        return [(s.left, s.right) for s in self.steps]

    def to_list(self) -> list[list[str]]:
        return [[s.left, s.right, s.result] for s in self.steps]

    @classmethod
    def from_list(cls, rows: Iterable[Sequence[str]]) -> ContractionSequence:
        return cls(tuple(ContractionStep(*r) for r in rows))

    @classmethod
    def from_pairs(cls, g: TensorGraph, pairs: Iterable[tuple[str, str]]) -> ContractionSequence:
        """Fill in result ids by replaying ``pairs`` on ``g``."""
        steps = []
        for left, right in pairs:
            g, _ = contract_pair(g, left, right)
            steps.append(ContractionStep(left, right, g.last_result))
        return cls(tuple(steps))


@dataclass(frozen=True)
class SequenceCost:
    total_macs: int = 0
    total_access_elems: int = 0
    peak_live_elems: int = 0
    # elementwise additions that merge block terms (BT only); not MACs
    block_sum_adds: int = 0

    @property
    def arithmetic_intensity(self) -> Fraction:
        if self.total_access_elems == 0:
            return Fraction(0)
        return Fraction(self.total_macs, self.total_access_elems)

    @property
    def flops(self) -> int:
        return 2 * self.total_macs

    def to_dict(self) -> dict:
        return {
            "total_macs": self.total_macs,
            "flops": self.flops,
            "total_access_elems": self.total_access_elems,
            "arithmetic_intensity": float(self.arithmetic_intensity),
            "peak_live_elems": self.peak_live_elems,
            "block_sum_adds": self.block_sum_adds,
        }


@dataclass
class TensorGraph:
    nodes: dict[str, TensorNode]
    dim_table: dict[int, Dim]
    format: str | None = None
    # number of replicated block terms summed elementwise (BT); 1 otherwise
    block_terms: int = 1
    history: frozenset = field(default_factory=frozenset)
    last_result: str | None = None

    def __post_init__(self):
        if not self.history:
            self.history = frozenset(self.nodes)
        refs: dict[int, int] = {}
        for node in self.nodes.values():
            if not node.dims:
                raise GraphError(f"node {node.id} has order 0")
            if len(set(node.dims)) != len(node.dims):
                raise GraphError(f"node {node.id} repeats a dim")
            for d in node.dims:
                if d not in self.dim_table:
                    raise GraphError(f"node {node.id} references unknown dim {d}")
                refs[d] = refs.get(d, 0) + 1
        over = [d for d, c in refs.items() if c > 2]
        if over:
            raise HyperEdge(f"dims {over} are shared by more than two nodes")
        for dim in self.dim_table.values():
            if dim.size < 1:
                raise EmptySpec(f"dim {dim.label or dim.id} has size {dim.size}")

    def size(self, d: int) -> int:
        return self.dim_table[d].size

    def shape(self, node_id: str) -> tuple[int, ...]:
        return tuple(self.dim_table[d].size for d in self.nodes[node_id].dims)

    def elems(self, node_id: str) -> int:
        return math.prod(self.shape(node_id))

    def labels(self, node_id: str) -> list[str]:
        return [self.dim_table[d].label for d in self.nodes[node_id].dims]

    def dim_refs(self) -> dict[int, list[str]]:
        refs: dict[int, list[str]] = {}
        for node in self.nodes.values():
            for d in node.dims:
                refs.setdefault(d, []).append(node.id)
        return refs

    def output_dims(self) -> tuple[int, ...]:
        """Dangling dims of the whole network, ascending by id."""
        return tuple(sorted(d for d, ids in self.dim_refs().items() if len(ids) == 1))

    def edges(self) -> list[tuple[str, str, int]]:
        return [(ids[0], ids[1], d) for d, ids in self.dim_refs().items() if len(ids) == 2]

    def connected(self, i: str, j: str) -> bool:
        return bool(set(self.nodes[i].dims) & set(self.nodes[j].dims))

    def input_ids(self) -> list[str]:
        return [n.id for n in self.nodes.values() if n.kind == NodeKind.INPUT]

    def weight_ids(self) -> list[str]:
        return [n.id for n in self.nodes.values() if n.kind in WEIGHT_KINDS]

    def fresh_id(self) -> str:
        k = 0
        while f"t{k}" in self.history:
            k += 1
        return f"t{k}"

    def node_index(self, node_id: str) -> int:
        return list(self.nodes).index(node_id)


def _alloc(table: dict[int, Dim], size: int, label: str) -> int:
    did = len(table)
    table[did] = Dim(did, int(size), label)
    return did


def _graph(nodes: list[TensorNode], table: dict[int, Dim], fmt: str, blocks: int = 1) -> TensorGraph:
    return TensorGraph({n.id: n for n in nodes}, table, format=fmt, block_terms=blocks)


@dataclass
class FormatSpec:
    format: str
    batch: int
    m_dims: list[int]
    n_dims: list[int]
    ranks: list[int] = field(default_factory=list)
    bt_blocks: int = 1

    FORMATS = ("Dense", "TT", "TTM", "TR", "HT", "BT")

    def __post_init__(self):
        fmt = {f.lower(): f for f in self.FORMATS}.get(str(self.format).lower())
        if fmt is None:
            raise GraphError(f"unknown format {self.format!r}")
        self.format = fmt
        self.m_dims = [int(v) for v in self.m_dims]
        self.n_dims = [int(v) for v in self.n_dims]
        self.ranks = [int(v) for v in self.ranks]

    @classmethod
    def from_dict(cls, d: Mapping) -> FormatSpec:
        return cls(
            format=d["format"],
            batch=int(d["batch"]),
            m_dims=list(d.get("m_dims", [])),
            n_dims=list(d.get("n_dims", [])),
            ranks=list(d.get("ranks", [])),
            bt_blocks=int(d.get("bt_blocks", 1)),
        )

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "batch": self.batch,
            "m_dims": list(self.m_dims),
            "n_dims": list(self.n_dims),
            "ranks": list(self.ranks),
            "bt_blocks": self.bt_blocks,
        }

    @property
    def dense_m(self) -> int:
        return math.prod(self.m_dims)

    @property
    def dense_n(self) -> int:
        return math.prod(self.n_dims)


def _check_nonempty(spec: FormatSpec):
    if spec.batch < 1 or not spec.m_dims or not spec.n_dims:
        raise EmptySpec("batch, m_dims and n_dims must be non-empty and positive")
    if any(v < 1 for v in spec.m_dims + spec.n_dims + spec.ranks) or spec.bt_blocks < 1:
        raise EmptySpec("all sizes must be >= 1")


def build_format(spec: FormatSpec) -> TensorGraph:
    """Build the tensor-network graph of a (possibly) tensorized linear layer.

    Dims are allocated batch first, then output modes, then input modes, then
    ranks, so ascending dim id gives the output order ``(B, M_1.., ...)``.
    """
    _check_nonempty(spec)
    builder = {
        "Dense": _build_dense,
        "TT": _build_tt,
        "TTM": _build_ttm,
        "TR": _build_tr,
        "HT": _build_ht,
        "BT": _build_bt,
    }[spec.format]
    return builder(spec)


def _io_dims(spec, table, m_sizes, n_sizes):
    b = _alloc(table, spec.batch, "B")
    ms = [_alloc(table, s, f"M{i + 1}") for i, s in enumerate(m_sizes)]
    ns = [_alloc(table, s, f"N{i + 1}") for i, s in enumerate(n_sizes)]
    return b, ms, ns


def _build_dense(spec):
    table: dict[int, Dim] = {}
    b, (m,), (n,) = _io_dims(spec, table, [spec.dense_m], [spec.dense_n])
    nodes = [
        TensorNode("X", (b, n), NodeKind.INPUT),
        TensorNode("W", (m, n), NodeKind.WEIGHT),
    ]
    return _graph(nodes, table, "Dense")


def _build_tt(spec):
    s, t = len(spec.m_dims), len(spec.n_dims)
    d = s + t
    if len(spec.ranks) != d + 1:
        raise RankMismatch(f"TT needs {d + 1} ranks, got {len(spec.ranks)}")
    if spec.ranks[0] != 1 or spec.ranks[d] != 1:
        raise RankMismatch("TT boundary ranks must be 1")
    table: dict[int, Dim] = {}
    b, ms, ns = _io_dims(spec, table, spec.m_dims, spec.n_dims)
    rs = [_alloc(table, r, f"R{i}") for i, r in enumerate(spec.ranks)]
    nodes = [TensorNode("X", (b, *ns), NodeKind.INPUT)]
    for i, mode in enumerate(ms + ns):
        nodes.append(TensorNode(f"G{i + 1}", (rs[i], mode, rs[i + 1]), NodeKind.WEIGHT))
    return _graph(nodes, table, "TT")


def _build_ttm(spec):
    d = len(spec.m_dims)
    if len(spec.n_dims) != d:
        raise RankMismatch("TTM needs len(m_dims) == len(n_dims)")
    if len(spec.ranks) != d + 1:
        raise RankMismatch(f"TTM needs {d + 1} ranks, got {len(spec.ranks)}")
    if spec.ranks[0] != 1 or spec.ranks[d] != 1:
        raise RankMismatch("TTM boundary ranks must be 1")
    table: dict[int, Dim] = {}
    b, ms, ns = _io_dims(spec, table, spec.m_dims, spec.n_dims)
    rs = [_alloc(table, r, f"R{i}") for i, r in enumerate(spec.ranks)]
    nodes = [TensorNode("X", (b, *ns), NodeKind.INPUT)]
    for i in range(d):
        nodes.append(TensorNode(f"G{i + 1}", (rs[i], ms[i], ns[i], rs[i + 1]), NodeKind.WEIGHT))
    return _graph(nodes, table, "TTM")


def _build_tr(spec):
    s, t = len(spec.m_dims), len(spec.n_dims)
    d = s + t
    if len(spec.ranks) != d + 1:
        raise RankMismatch(f"TR needs {d + 1} ranks, got {len(spec.ranks)}")
    if spec.ranks[0] != spec.ranks[d]:
        raise RankMismatch("TR needs ranks[0] == ranks[d]")
    if d < 2:
        raise RankMismatch("TR needs at least two cores")
    table: dict[int, Dim] = {}
    b, ms, ns = _io_dims(spec, table, spec.m_dims, spec.n_dims)
    rs = [_alloc(table, r, f"R{i}") for i, r in enumerate(spec.ranks[:d])]
    rs.append(rs[0])  # ring closure
    nodes = [TensorNode("X", (b, *ns), NodeKind.INPUT)]
    for i, mode in enumerate(ms + ns):
        nodes.append(TensorNode(f"G{i + 1}", (rs[i], mode, rs[i + 1]), NodeKind.WEIGHT))
    return _graph(nodes, table, "TR")


def _build_ht(spec):
    # fixed 4-leaf balanced tree: U1(R1,R2,R5), U2(R3,R4,R6), U3(R5,R6)
    if len(spec.m_dims) != 4 or len(spec.n_dims) != 4:
        raise RankMismatch("HT supports exactly four leaves")
    if len(spec.ranks) != 6:
        raise RankMismatch("HT needs 6 ranks: 4 leaf ranks then 2 internal ranks")
    table: dict[int, Dim] = {}
    b, ms, ns = _io_dims(spec, table, spec.m_dims, spec.n_dims)
    rs = [_alloc(table, r, f"R{i + 1}") for i, r in enumerate(spec.ranks)]
    nodes = [TensorNode("X", (b, *ns), NodeKind.INPUT)]
    for i in range(4):
        nodes.append(TensorNode(f"G{i + 1}", (ms[i], ns[i], rs[i]), NodeKind.WEIGHT))
    nodes += [
        TensorNode("U1", (rs[0], rs[1], rs[4]), NodeKind.TRANSFER),
        TensorNode("U2", (rs[2], rs[3], rs[5]), NodeKind.TRANSFER),
        TensorNode("U3", (rs[4], rs[5]), NodeKind.TRANSFER),
    ]
    return _graph(nodes, table, "HT")


def _build_bt(spec):
    d = len(spec.m_dims)
    if len(spec.n_dims) != d:
        raise RankMismatch("BT needs len(m_dims) == len(n_dims)")
    if len(spec.ranks) != d:
        raise RankMismatch(f"BT needs {d} ranks, got {len(spec.ranks)}")
    table: dict[int, Dim] = {}
    b, ms, ns = _io_dims(spec, table, spec.m_dims, spec.n_dims)
    rs = [_alloc(table, r, f"R{i + 1}") for i, r in enumerate(spec.ranks)]
    nodes = [TensorNode("X", (b, *ns), NodeKind.INPUT)]
    for i in range(d):
        nodes.append(TensorNode(f"G{i + 1}", (ms[i], ns[i], rs[i]), NodeKind.WEIGHT))
    nodes.append(TensorNode("U", tuple(rs), NodeKind.TRANSFER))
    return _graph(nodes, table, "BT", blocks=spec.bt_blocks)


def contract_pair(g: TensorGraph, i: str, j: str) -> tuple[TensorGraph, StepCost]:
    """Merge nodes ``i`` and ``j``; shared dims vanish, dangling dims persist."""
    if i == j:
        raise GraphError("cannot contract a node with itself")
    for nid in (i, j):
        if nid not in g.nodes:
            raise DeadNode(f"node {nid!r} is not live")
    a, b = g.nodes[i], g.nodes[j]
    bset, aset = set(b.dims), set(a.dims)
    out = tuple(d for d in a.dims if d not in bset) + tuple(d for d in b.dims if d not in aset)
    union = aset | bset
    macs = math.prod(g.size(d) for d in union)
    result_id = g.fresh_id()
    kind = NodeKind.INTERMEDIATE
    nodes = {k: v for k, v in g.nodes.items() if k not in (i, j)}
    if not nodes:
        kind = NodeKind.OUTPUT
    if not out:
        raise GraphError("contraction would produce a scalar; the layer output has dangling dims")
    nodes[result_id] = TensorNode(result_id, out, kind)
    cost = StepCost(
        macs=macs,
        left_elems=g.elems(i),
        right_elems=g.elems(j),
        result_elems=math.prod(g.size(d) for d in out),
    )
    new = TensorGraph(
        nodes,
        g.dim_table,
        format=g.format,
        block_terms=g.block_terms,
        history=g.history | {result_id},
        last_result=result_id,
    )
    return new, cost


def replay(g: TensorGraph, seq: ContractionSequence) -> tuple[TensorGraph, list[StepCost]]:
    costs = []
    for step in seq:
        try:
            g, c = contract_pair(g, step.left, step.right)
        except GraphError as exc:
            raise InvalidSequence(str(exc)) from exc
        if g.last_result != step.result:
            raise InvalidSequence(f"step result {step.result!r} does not match replay id {g.last_result!r}")
        costs.append(c)
    return g, costs


def sequence_totals(g: TensorGraph, seq: ContractionSequence) -> SequenceCost:
    start = g
    end, costs = replay(g, seq)
    if len(end.nodes) != 1:
        raise InvalidSequence(f"sequence leaves {len(end.nodes)} nodes")
    if not costs:
        return SequenceCost()
    live = {nid: start.elems(nid) for nid in start.nodes}
    peak = 0
    for step, c in zip(seq, costs):
        peak = max(peak, sum(live.values()) + c.result_elems)
        del live[step.left], live[step.right]
        live[step.result] = c.result_elems
    k = g.block_terms
    macs = sum(c.macs for c in costs)
    access = sum(c.left_elems + c.right_elems + c.result_elems for c in costs)
    return SequenceCost(
        total_macs=macs * k,
        total_access_elems=access * k,
        peak_live_elems=peak * k,
        block_sum_adds=(k - 1) * costs[-1].result_elems,
    )


def _check_values(g: TensorGraph, values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for nid, node in g.nodes.items():
        if nid not in values:
            raise ShapeMismatch(f"no value for node {nid!r}")
        arr = np.asarray(values[nid], dtype=np.float64)
        want = g.shape(nid)
        if g.block_terms > 1 and node.kind in WEIGHT_KINDS:
            want = (g.block_terms, *want)
        if arr.shape != want:
            raise ShapeMismatch(f"node {nid!r}: expected shape {want}, got {arr.shape}")
        out[nid] = arr
    return out


def contract_arrays(a: np.ndarray, a_dims, b: np.ndarray, b_dims, out_dims) -> np.ndarray:
    """Exact index-sum contraction of two labelled arrays."""
    local = {d: k for k, d in enumerate(dict.fromkeys([*a_dims, *b_dims]))}
    return np.einsum(a, [local[d] for d in a_dims], b, [local[d] for d in b_dims], [local[d] for d in out_dims])


def _run_block(g: TensorGraph, seq: ContractionSequence, vals: dict[str, np.ndarray]) -> np.ndarray:
    dims = {nid: n.dims for nid, n in g.nodes.items()}
    cur = dict(vals)
    for step in seq:
        a_dims, b_dims = dims.pop(step.left), dims.pop(step.right)
        bset, aset = set(b_dims), set(a_dims)
        out = tuple(d for d in a_dims if d not in bset) + tuple(d for d in b_dims if d not in aset)
        cur[step.result] = contract_arrays(cur.pop(step.left), a_dims, cur.pop(step.right), b_dims, out)
        dims[step.result] = out
    (last,) = dims
    order = g.output_dims()
    return np.transpose(cur[last], [dims[last].index(d) for d in order])


def evaluate_numeric(g: TensorGraph, seq: ContractionSequence, values: Mapping[str, np.ndarray]) -> np.ndarray:
    """Execute ``seq`` numerically in float64.

    The result is laid out by ascending dangling-dim id, so any two valid
    sequences return arrays of identical shape.  For BT graphs weight values
    carry a leading block axis and block results are summed.
    """
    vals = _check_values(g, values)
    end, _ = replay(g, seq)
    if len(end.nodes) != 1:
        raise InvalidSequence(f"sequence leaves {len(end.nodes)} nodes")
    if g.block_terms == 1:
        return _run_block(g, seq, vals)
    total = None
    for k in range(g.block_terms):
        blk = {nid: (v[k] if g.nodes[nid].kind in WEIGHT_KINDS else v) for nid, v in vals.items()}
        part = _run_block(g, seq, blk)
        total = part if total is None else total + part
    return total


def reconstruct_weight(g: TensorGraph, values: Mapping[str, np.ndarray]) -> np.ndarray:
    """Contract all weight nodes into the dense weight tensor (block sum for BT)."""
    wids = g.weight_ids()
    sub = TensorGraph({k: g.nodes[k] for k in wids}, g.dim_table, format=g.format, block_terms=g.block_terms)
    pairs = []
    acc = wids[0]
    probe = sub
    for nid in wids[1:]:
        probe, _ = contract_pair(probe, acc, nid)
        pairs.append((acc, nid))
        acc = probe.last_result
    seq = ContractionSequence.from_pairs(sub, pairs)
    return evaluate_numeric(sub, seq, {k: values[k] for k in wids})


def parameter_count(g: TensorGraph) -> int:
    return g.block_terms * sum(g.elems(k) for k in g.weight_ids())


def dense_parameter_count(spec: FormatSpec) -> int:
    return spec.dense_m * spec.dense_n


def random_values(g: TensorGraph, rng: np.random.Generator, integer: bool = False) -> dict[str, np.ndarray]:
    out = {}
    for nid, node in g.nodes.items():
        shape = g.shape(nid)
        if g.block_terms > 1 and node.kind in WEIGHT_KINDS:
            shape = (g.block_terms, *shape)
        if integer:
            out[nid] = rng.integers(-3, 4, size=shape).astype(np.float64)
        else:
            out[nid] = rng.standard_normal(shape)
    return out
