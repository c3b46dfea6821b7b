"""Training workload expansion: forward, input-gradient and weight-gradient ops.

Every forward step C = contract(A, B) gets two adjoint contractions,
dA = contract(dC, B) and dB = contract(dC, A).  Gradients keep the dim order
of the tensor they differentiate.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .graph import (
    ContractionSequence,
    Dim,
    FormatSpec,
    GraphError,
    NodeKind,
    TensorGraph,
    contract_arrays,
    evaluate_numeric,
    random_values,
    replay,
)


class MultipleInputs(GraphError):
    pass


class NoOutput(GraphError):
    pass


class Phase(str, enum.Enum):
    FP = "FP"
    BP = "BP"
    WG = "WG"


@dataclass(frozen=True)
class TensorInfo:
    name: str
    dims: tuple[int, ...]
    kind: str  # input | weight | intermediate | output | grad
    # primal tensor a gradient belongs to
    of: str | None = None


@dataclass(frozen=True)
class ContractionOp:
    id: str
    operand_a: str
    operand_b: str
    result: str
    phase: Phase
    contracted_dims: tuple[int, ...]


@dataclass
class TrainingWorkload:
    ops: list[ContractionOp]
    tensors: dict[str, TensorInfo]
    dim_table: dict[int, Dim]
    stored: frozenset = frozenset()
    layer_meta: FormatSpec | None = None
    graph: TensorGraph | None = None
    sequence: ContractionSequence | None = None
    # identical copies of the workload executed per layer (BT block terms)
    repeat: int = 1

    def dims(self, name: str) -> tuple[int, ...]:
        return self.tensors[name].dims

    def size(self, d: int) -> int:
        return self.dim_table[d].size

    def elems(self, name: str) -> int:
        return math.prod(self.size(d) for d in self.dims(name))

    def op_macs(self, op: ContractionOp) -> int:
        union = set(self.dims(op.operand_a)) | set(self.dims(op.operand_b))
        return math.prod(self.size(d) for d in union)

    def total_macs(self) -> int:
        return self.repeat * sum(self.op_macs(op) for op in self.ops)

    def phase_ops(self, phase: Phase) -> list[ContractionOp]:
        return [op for op in self.ops if op.phase == phase]

    def producers(self) -> dict[str, ContractionOp]:
        return {op.result: op for op in self.ops}

    def to_dict(self) -> dict:
        return {
            "repeat": self.repeat,
            "stored": sorted(self.stored),
            "tensors": {
                k: {"dims": list(t.dims), "kind": t.kind, "shape": [self.size(d) for d in t.dims]}
                for k, t in sorted(self.tensors.items())
            },
            "ops": [
                {
                    "id": op.id,
                    "phase": op.phase.value,
                    "a": op.operand_a,
                    "b": op.operand_b,
                    "result": op.result,
                    "contracted_dims": list(op.contracted_dims),
                    "macs": self.op_macs(op),
                }
                for op in self.ops
            ],
        }


_KIND_NAMES = {
    NodeKind.INPUT: "input",
    NodeKind.WEIGHT: "weight",
    NodeKind.TRANSFER: "weight",
    NodeKind.INTERMEDIATE: "intermediate",
    NodeKind.OUTPUT: "output",
}


def _grad(name: str) -> str:
    return f"d{name}"


def _forward(g: TensorGraph, fwd: ContractionSequence):
    inputs = g.input_ids()
    if len(inputs) > 1:
        raise MultipleInputs(f"graph has {len(inputs)} input nodes")
    end, _ = replay(g, fwd)
    if len(end.nodes) != 1:
        raise NoOutput(f"sequence leaves {len(end.nodes)} live nodes")
    (out_id,) = end.nodes
    tensors = {nid: TensorInfo(nid, n.dims, _KIND_NAMES[n.kind]) for nid, n in g.nodes.items()}
    ops = []
    dims = {nid: n.dims for nid, n in g.nodes.items()}
    for k, step in enumerate(fwd):
        a, b = dims[step.left], dims[step.right]
        shared = tuple(d for d in a if d in set(b))
        out = tuple(d for d in a if d not in set(b)) + tuple(d for d in b if d not in set(a))
        dims[step.result] = out
        kind = "output" if step.result == out_id else "intermediate"
        tensors[step.result] = TensorInfo(step.result, out, kind)
        ops.append(ContractionOp(f"fp{k}", step.left, step.right, step.result, Phase.FP, shared))
    return ops, tensors, out_id


def forward_workload(g: TensorGraph, fwd: ContractionSequence, spec: FormatSpec | None = None) -> TrainingWorkload:
    """Inference-only workload: the forward ops with nothing retained."""
    ops, tensors, _ = _forward(g, fwd)
    return TrainingWorkload(ops, tensors, g.dim_table, frozenset(), spec, g, fwd, g.block_terms)


def expand_training(
    g: TensorGraph,
    fwd: ContractionSequence,
    spec: FormatSpec | None = None,
    frozen: frozenset | set = frozenset(),
) -> TrainingWorkload:
    """Expand ``fwd`` into FP, BP and WG ops.

    ``frozen`` names weight nodes whose gradients are not needed; adjoint ops
    that only feed those gradients are dropped.  The input gradient is always
    produced.
    """
    if not g.input_ids():
        raise GraphError("graph has no input node")
    ops, tensors, out_id = _forward(g, fwd)
    need = {nid for nid in g.nodes if nid not in frozen or g.nodes[nid].kind == NodeKind.INPUT}
    # a tensor's gradient is live when its subtree holds a node that needs one
    live = {nid: nid in need for nid in g.nodes}
    for op in ops:
        live[op.result] = live[op.operand_a] or live[op.operand_b]

    tensors[_grad(out_id)] = TensorInfo(_grad(out_id), tensors[out_id].dims, "grad", out_id)
    adj = []
    k = 0
    for op in reversed(ops):
        dc = _grad(op.result)
        for target, other in ((op.operand_a, op.operand_b), (op.operand_b, op.operand_a)):
            if not live[target]:
                continue
            contracted = tuple(d for d in tensors[dc].dims if d in set(tensors[other].dims))
            phase = Phase.WG if tensors[target].kind == "weight" else Phase.BP
            name = _grad(target)
            tensors[name] = TensorInfo(name, tensors[target].dims, "grad", target)
            adj.append(ContractionOp(f"{phase.value.lower()}{k}", dc, other, name, phase, contracted))
            k += 1

    stored = frozenset(
        t for op in adj for t in (op.operand_a, op.operand_b) if tensors[t].kind in ("input", "intermediate", "output")
    )
    return TrainingWorkload(ops + adj, tensors, g.dim_table, stored, spec, g, fwd, g.block_terms)


def stored_footprint(w: TrainingWorkload) -> int:
    """Elements retained from the forward pass for backward use."""
    return w.repeat * sum(w.elems(t) for t in w.stored)


def _order(arr: np.ndarray, have: tuple[int, ...], want: tuple[int, ...]) -> np.ndarray:
    return np.transpose(arr, [have.index(d) for d in want])


def _run_ops(w: TrainingWorkload, env: dict, ops) -> None:
    for op in ops:
        a, b = op.operand_a, op.operand_b
        env[op.result] = contract_arrays(env[a], w.dims(a), env[b], w.dims(b), w.dims(op.result))


def execute_workload(
    w: TrainingWorkload,
    values: Mapping[str, np.ndarray],
    d_out: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Run every op in float64; returns all tensors including gradients.

    ``d_out`` (laid out by ascending dangling-dim id) defaults to ones, the
    gradient of the sum of outputs.  For block-term graphs, weight-related
    tensors carry a leading block axis and input gradients sum over blocks.
    """
    fp = w.phase_ops(Phase.FP)
    adj = [op for op in w.ops if op.phase != Phase.FP]
    out_name = fp[-1].result if fp else None
    weights = {k for k, t in w.tensors.items() if t.kind == "weight"}
    per_block = []
    for blk in range(w.repeat):
        env = {}
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            env[k] = v[blk] if (w.repeat > 1 and k in weights) else v
        _run_ops(w, env, fp)
        if adj:
            shape_dims = w.dims(out_name)
            if d_out is None:
                env[_grad(out_name)] = np.ones(tuple(w.size(d) for d in shape_dims))
            else:
                env[_grad(out_name)] = _order(np.asarray(d_out, dtype=np.float64), w.graph.output_dims(), shape_dims)
            _run_ops(w, env, adj)
        per_block.append(env)
    if w.repeat == 1:
        return per_block[0]
    out = {}
    for k in per_block[0]:
        info = w.tensors[k]
        if info.kind == "input" or k == _grad(out_name):
            out[k] = per_block[0][k]
        elif info.kind == "grad" and w.tensors[info.of].kind == "input" or k == out_name:
            out[k] = sum(env[k] for env in per_block)
        else:
            out[k] = np.stack([env[k] for env in per_block])
    return out


def gradient_check(
    w: TrainingWorkload,
    values: Mapping[str, np.ndarray] | None = None,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Max relative error of workload gradients against central differences.

    The loss is the sum of layer outputs.  Relative error per tensor is the
    largest absolute deviation over the largest reference magnitude.
    """
    g, seq = w.graph, w.sequence
    if values is None:
        values = random_values(g, np.random.default_rng(seed))
    values = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    got = execute_workload(w, values)

    def loss(vals):
        return float(evaluate_numeric(g, seq, vals).sum())

    worst = 0.0
    for nid in g.nodes:
        if _grad(nid) not in got:
            continue
        ref = np.zeros_like(values[nid])
        flat = values[nid].reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + step
            up = loss(values)
            flat[idx] = keep - step
            down = loss(values)
            flat[idx] = keep
            ref.reshape(-1)[idx] = (up - down) / (2 * step)
        scale = max(float(np.abs(ref).max()), 1e-12)
        worst = max(worst, float(np.abs(got[_grad(nid)] - ref).max()) / scale)
    return worst
