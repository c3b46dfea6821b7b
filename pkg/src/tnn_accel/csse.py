"""Contraction sequence search.

Stage 1 enumerates pairwise contraction sequences depth-first, keeping the
N cheapest (in MACs) in a bounded candidate list.  Stage 2 reranks those
candidates with the analytical performance model.  Restricted (input-rooted)
and fixed sequences are provided as baselines.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .graph import (
    ContractionSequence,
    ContractionStep,
    GraphError,
    NodeKind,
    TensorGraph,
    contract_pair,
    sequence_totals,
)

if TYPE_CHECKING:
    from .perf_model import HardwareConfig, Policy

DEFAULT_CANDIDATES = 64


class UnsupportedFormat(GraphError):
    pass


class Metric(str, enum.Enum):
    FLOPS = "flops"
    LATENCY = "latency"
    ENERGY = "energy"
    EDP = "edp"


class Mode(str, enum.Enum):
    INFERENCE = "inference"
    TRAINING = "training"


def count_sequences(k: int) -> int:
    """Number of ordered pairwise contraction sequences for ``k`` nodes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return math.prod(math.comb(i, 2) for i in range(2, k + 1))


class CandidateList:
    """Bounded list of (sequence, macs), ascending by macs.

    Equal-cost entries keep insertion order; duplicates are retained.
    """

    def __init__(self, capacity: int, graph: TensorGraph | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.graph = graph
        self._costs: list[int] = []
        self._seqs: list[ContractionSequence] = []
        self.visited = 0
        self.pruned = 0

    def max(self) -> float:
        if len(self._costs) < self.capacity:
            return math.inf
        return self._costs[-1]

    def insert(self, seq: ContractionSequence, macs: int) -> None:
        pos = bisect.bisect_right(self._costs, macs)
        self._costs.insert(pos, macs)
        self._seqs.insert(pos, seq)
        if len(self._costs) > self.capacity:
            self._costs.pop()
            self._seqs.pop()

    @property
    def entries(self) -> list[tuple[ContractionSequence, int]]:
        return list(zip(self._seqs, self._costs))

    def __len__(self):
        return len(self._costs)


def _fresh_names(g: TensorGraph, count: int) -> list[str]:
    names, k = [], 0
    while len(names) < count:
        if f"t{k}" not in g.history:
            names.append(f"t{k}")
        k += 1
    return names


def stage1_search(
    g: TensorGraph,
    n: int = DEFAULT_CANDIDATES,
    prune: bool = True,
    include_outer: bool = True,
) -> CandidateList:
    """Depth-first enumeration of pair merges with a bounded candidate list.

    With ``prune`` a branch is cut once its accumulated MACs already reach the
    worst retained candidate; step costs are nonnegative so the final list is
    unchanged.  ``visited`` counts completed sequences reached.
    """
    cands = CandidateList(n, g)
    ids = list(g.nodes)
    bit = {d: 1 << k for k, d in enumerate(sorted(g.dim_table))}
    sizes = {1 << k: g.size(d) for k, d in enumerate(sorted(g.dim_table))}
    size_cache: dict[int, int] = {0: 1}

    def size_of(mask: int) -> int:
        s = size_cache.get(mask)
        if s is None:
            s = 1
            m = mask
            while m:
                low = m & -m
                s *= sizes[low]
                m ^= low
            size_cache[mask] = s
        return s

    start = [(nid, sum(bit[d] for d in g.nodes[nid].dims)) for nid in ids]
    fresh = _fresh_names(g, max(len(ids) - 1, 0))
    scale = g.block_terms
    steps: list[ContractionStep] = []

    def rec(nodes, acc, depth):
        if len(nodes) == 1:
            cands.visited += 1
            if acc * scale < cands.max():
                cands.insert(ContractionSequence(tuple(steps)), acc * scale)
            return
        count = len(nodes)
        any_shared = include_outer or any(nodes[a][1] & nodes[b][1] for a in range(count) for b in range(a + 1, count))
        for a in range(count):
            ia, ma = nodes[a]
            for b in range(a + 1, count):
                ib, mb = nodes[b]
                if not include_outer and any_shared and not (ma & mb):
                    continue
                new_acc = acc + size_of(ma | mb)
                if prune and new_acc * scale >= cands.max():
                    cands.pruned += 1
                    continue
                rest = nodes[:a] + nodes[a + 1 : b] + nodes[b + 1 :]
                rest.append((fresh[depth], ma ^ mb))
                steps.append(ContractionStep(ia, ib, fresh[depth]))
                rec(rest, new_acc, depth + 1)
                steps.pop()

    rec(start, 0, 0)
    return cands


@dataclass
class SearchResult:
    best_seq: ContractionSequence
    best_cost: float
    metric: Metric
    visited: int = 0
    pruned: int = 0
    best_macs: int = 0
    # metric value per candidate in Stage-1 order
    scores: list[float] = field(default_factory=list)


def _seq_key(seq: ContractionSequence):
    return tuple((s.left, s.right) for s in seq)


def stage2_rerank(
    cands: CandidateList,
    hw: HardwareConfig | None = None,
    metric: Metric | str = Metric.EDP,
    mode: Mode | str = Mode.TRAINING,
    policy: Policy | None = None,
) -> SearchResult:
    """Pick the candidate minimizing ``metric`` under the performance model.

    Ties go to lower MACs, then to lexicographically smaller step order.
    """
    metric, mode = Metric(metric), Mode(mode)
    entries = cands.entries
    if not entries:
        raise ValueError("empty candidate list")
    if metric == Metric.FLOPS or len(entries) == 1:
        seq, macs = entries[0]
        return SearchResult(seq, 2 * macs, metric, cands.visited, cands.pruned, macs, [2 * m for _, m in entries])
    if hw is None or cands.graph is None:
        raise ValueError("hardware config and candidate graph are required for model-based metrics")
    from .perf_model import evaluate_workload
    from .training import expand_training, forward_workload

    scores = []
    best = None
    for seq, macs in entries:
        if mode == Mode.TRAINING:
            wl = expand_training(cands.graph, seq)
        else:
            wl = forward_workload(cands.graph, seq)
        rep = evaluate_workload(wl, hw, policy)
        score = rep.metric(metric.value)
        scores.append(score)
        key = (score, macs, _seq_key(seq))
        if best is None or key < best[0]:
            best = (key, seq, macs)
    (score, macs, _), seq, _ = best
    return SearchResult(seq, score, metric, cands.visited, cands.pruned, macs, scores)


def search(
    g: TensorGraph,
    n: int = DEFAULT_CANDIDATES,
    prune: bool = True,
    hw: HardwareConfig | None = None,
    metric: Metric | str = Metric.FLOPS,
    mode: Mode | str = Mode.TRAINING,
    policy: Policy | None = None,
) -> SearchResult:
    return stage2_rerank(stage1_search(g, n, prune), hw, metric, mode, policy)


def _single_input(g: TensorGraph) -> str:
    inputs = g.input_ids()
    if len(inputs) != 1:
        raise UnsupportedFormat(f"expected exactly one input node, found {len(inputs)}")
    return inputs[0]


def restricted_search(g: TensorGraph) -> ContractionSequence:
    """Best-MACs sequence that grows one accumulator from the input node.

    Every step merges the accumulator with a weight node it shares a dim
    with (an unconnected node only when nothing connected remains).
    """
    x = _single_input(g)
    weights = [nid for nid in g.nodes if nid != x]
    best: list = [math.inf, None]

    def rec(graph, acc_id, remaining, cost, pairs):
        if cost >= best[0]:
            return
        if not remaining:
            best[0], best[1] = cost, list(pairs)
            return
        linked = [w for w in remaining if graph.connected(acc_id, w)] or list(remaining)
        for w in linked:
            nxt, c = contract_pair(graph, acc_id, w)
            pairs.append((acc_id, w))
            rec(nxt, nxt.last_result, [r for r in remaining if r != w], cost + c.macs, pairs)
            pairs.pop()

    if not weights:
        return ContractionSequence()
    rec(g, x, weights, 0, [])
    return ContractionSequence.from_pairs(g, best[1])


class FixedStyle(str, enum.Enum):
    ASCENDING = "AscendingIndex"
    RECONSTRUCT = "Reconstruct"


def _chain_fold(g: TensorGraph, acc: str, order: list[str]) -> list[tuple[str, str]]:
    """Fold ``order`` into ``acc``, always taking the lowest-index node linked to it."""
    pairs = []
    remaining = list(order)
    graph = g
    while remaining:
        linked = [w for w in remaining if graph.connected(acc, w)]
        pick = linked[0] if linked else remaining[0]
        graph, _ = contract_pair(graph, acc, pick)
        pairs.append((acc, pick))
        remaining.remove(pick)
        acc = graph.last_result
    return pairs


def fixed_sequence(g: TensorGraph, style: FixedStyle | str = FixedStyle.ASCENDING) -> ContractionSequence:
    """Conventional fixed sequences.

    ``AscendingIndex`` merges the input first with the cores it touches, in
    core-index order, then walks the remaining cores from the accumulator.
    ``Reconstruct`` rebuilds the dense weight from the cores and finishes with
    a single input-weight contraction.
    """
    style = FixedStyle(style)
    x = _single_input(g)
    weights = [nid for nid, node in g.nodes.items() if node.kind != NodeKind.INPUT]
    if not weights:
        raise UnsupportedFormat("graph has no weight nodes")
    if style == FixedStyle.ASCENDING:
        touching = [w for w in weights if g.connected(x, w)]
        pairs = []
        graph, acc = g, x
        for w in touching:
            graph, _ = contract_pair(graph, acc, w)
            pairs.append((acc, w))
            acc = graph.last_result
        rest = [w for w in weights if w not in touching]
        pairs += _chain_fold(graph, acc, rest)
        return ContractionSequence.from_pairs(g, pairs)
    pairs = _chain_fold(g, weights[0], weights[1:])
    graph = g
    for p in pairs:
        graph, _ = contract_pair(graph, *p)
    w_id = graph.last_result if pairs else weights[0]
    pairs.append((x, w_id))
    return ContractionSequence.from_pairs(g, pairs)


def best_macs(g: TensorGraph, seq: ContractionSequence) -> int:
    return sequence_totals(g, seq).total_macs


def random_sequence(g: TensorGraph, rng) -> ContractionSequence:
    """Uniformly random pairwise order; outer products allowed."""
    pairs = []
    graph = g
    while len(graph.nodes) > 1:
        live = sorted(graph.nodes)
        i, j = rng.choice(len(live), size=2, replace=False)
        graph, _ = contract_pair(graph, live[i], live[j])
        pairs.append((live[i], live[j]))
    return ContractionSequence.from_pairs(g, pairs)
