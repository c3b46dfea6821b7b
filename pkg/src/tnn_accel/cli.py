"""Command-line front end: search, evaluate, compare, validate, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .csse import (
    FixedStyle,
    Metric,
    Mode,
    fixed_sequence,
    random_sequence,
    restricted_search,
    stage1_search,
    stage2_rerank,
)
from .graph import (
    ContractionSequence,
    FormatSpec,
    GraphError,
    build_format,
    dense_parameter_count,
    evaluate_numeric,
    parameter_count,
    random_values,
    sequence_totals,
)
from .hardware import ConfigError, HardwareConfig, load_hardware, preset_dir
from .perf_model import NoLegalMapping, evaluate_workload

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARSE = 2
EXIT_EVAL = 3

SEQUENCE_CHOICES = ("csse", "restricted", "fixed", "reconstruct")


class ParseError(ValueError):
    pass


class MismatchedLayers(ValueError):
    pass


def dumps(obj) -> str:
    """Canonical report text; write -> read -> write is byte-identical."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path: str | Path, what: str):
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"{what} {path}: {exc.strerror}") from exc
    if not text.strip():
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what} {path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def resolve_workload(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    candidate = preset_dir() / "workloads" / f"{name_or_path}.json"
    if candidate.exists():
        return candidate
    raise ParseError(f"workload {name_or_path!r} not found")


def load_workload(name_or_path: str) -> list[dict]:
    """Layer entries with a parsed ``spec`` and ``mode``."""
    path = resolve_workload(name_or_path)
    data = _read_json(path, "workload")
    if data is None:
        return []
    layers = data.get("layers") if isinstance(data, dict) else data
    if not isinstance(layers, list):
        raise ParseError(f"workload {path}: expected a list of layers")
    out, names = [], set()
    for k, entry in enumerate(layers):
        where = f"workload {path}: layer {k}"
        if not isinstance(entry, dict) or "name" not in entry:
            raise ParseError(f"{where}: each layer needs a name")
        name = str(entry["name"])
        if name in names:
            raise ParseError(f"{where}: duplicate layer name {name!r}")
        names.add(name)
        mode = entry.get("mode", "training")
        try:
            spec = FormatSpec.from_dict(entry)
            build_format(spec)
            Mode(mode)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where} ({name}): {exc}") from exc
        out.append({"name": name, "spec": spec, "mode": mode})
    return out


def _load_hardware_list(names: list[str] | None) -> list[HardwareConfig]:
    try:
        return [load_hardware(n) for n in (names or ["fetta"])]
    except (ConfigError, TypeError, ValueError) as exc:
        raise ParseError(str(exc)) from exc


def _workload_for(g, seq, mode):
    from .training import expand_training, forward_workload

    return expand_training(g, seq) if Mode(mode) == Mode.TRAINING else forward_workload(g, seq)


def _seq_record(g, seq: ContractionSequence, mode: str, hws: list[HardwareConfig]) -> dict:
    return {
        "sequence": seq.to_list(),
        "cost": sequence_totals(g, seq).to_dict(),
        "perf": {hw.name: evaluate_workload(_workload_for(g, seq, mode), hw).to_dict() for hw in hws},
    }


def _dense_record(spec: FormatSpec, mode: str, hws) -> dict:
    dense = FormatSpec("Dense", spec.batch, list(spec.m_dims), list(spec.n_dims))
    g = build_format(dense)
    rec = _seq_record(g, fixed_sequence(g), mode, hws)
    rec["params"] = dense_parameter_count(spec)
    return rec


def _layer_report(layer: dict, hws, args, chosen: str | None) -> dict:
    spec, name = layer["spec"], layer["name"]
    mode = args.mode or layer["mode"]
    g = build_format(spec)
    rec = {"name": name, "spec": spec.to_dict(), "mode": mode, "params": parameter_count(g)}
    try:
        if chosen is None:
            cands = stage1_search(g, args.candidates, prune=not args.no_prune)
            res = stage2_rerank(cands, hws[0], args.metric, mode)
            seq = res.best_seq
            rec["search"] = {
                "candidates": len(cands),
                "visited": cands.visited,
                "pruned": cands.pruned,
                "metric": Metric(args.metric).value,
                "rerank_hardware": hws[0].name,
                "best_score": res.best_cost,
            }
        else:
            seq = choose_sequence(g, chosen, args.candidates)
        rec.update(_seq_record(g, seq, mode, hws))
        rec["baselines"] = {
            "fixed": _seq_record(g, fixed_sequence(g), mode, hws),
            "restricted": _seq_record(g, restricted_search(g), mode, hws),
        }
        rec["dense"] = _dense_record(spec, mode, hws)
    except (GraphError, NoLegalMapping, ValueError) as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def choose_sequence(g, which: str, n: int = 64) -> ContractionSequence:
    if which == "csse":
        return stage1_search(g, n).entries[0][0]
    if which == "restricted":
        return restricted_search(g)
    if which == "fixed":
        return fixed_sequence(g, FixedStyle.ASCENDING)
    if which == "reconstruct":
        return fixed_sequence(g, FixedStyle.RECONSTRUCT)
    raise ValueError(f"unknown sequence {which!r}")


def build_report(command: str, layers: list[dict], hws, args, chosen: str | None = None) -> dict:
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        records = list(pool.map(lambda layer: _layer_report(layer, hws, args, chosen), layers))
    settings = {
        "candidates": args.candidates,
        "metric": Metric(args.metric).value,
        "mode": args.mode,
        "prune": not args.no_prune,
        "sequence": chosen or "search",
    }
    return {
        "tool": "tnn-accel",
        "version": __version__,
        "command": command,
        "settings": settings,
        "hardware": {hw.name: hw.to_dict() for hw in hws},
        "layers": records,
    }


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_search(args) -> int:
    layers = load_workload(args.workload)
    hws = _load_hardware_list(args.hardware)
    report = build_report("search", layers, hws, args)
    _emit(dumps(report), args.out)
    return EXIT_EVAL if any("error" in r for r in report["layers"]) else EXIT_OK


def cmd_evaluate(args) -> int:
    layers = load_workload(args.workload)
    hws = _load_hardware_list(args.hardware)
    report = build_report("evaluate", layers, hws, args, chosen=args.sequence)
    _emit(dumps(report), args.out)
    return EXIT_EVAL if any("error" in r for r in report["layers"]) else EXIT_OK


def read_report(path: str) -> dict:
    data = _read_json(path, "report")
    if not isinstance(data, dict) or "layers" not in data:
        raise ParseError(f"report {path}: missing layers")
    return data


# (metric, higher_is_better)
_SEQ_METRICS = (
    ("flops", False),
    ("memory_access", False),
    ("arithmetic_intensity", True),
    ("params", False),
)
_HW_METRICS = ("latency_s", "energy_pj", "edp")


def _layer_values(rec: dict) -> dict[str, float]:
    vals = {
        "flops": rec["cost"]["flops"],
        "memory_access": rec["cost"]["total_access_elems"],
        "arithmetic_intensity": rec["cost"]["arithmetic_intensity"],
        "params": rec["params"],
    }
    for hw, perf in sorted(rec.get("perf", {}).items()):
        for m in _HW_METRICS:
            vals[f"{m}@{hw}"] = perf[m]
    return vals


def _ratio(ref: float, val: float, higher_better: bool) -> float:
    """Improvement factor of ``val`` over ``ref``; 1.0 means equal."""
    num, den = (val, ref) if higher_better else (ref, val)
    if den == 0:
        return 1.0 if num == 0 else float("inf")
    return num / den


def compare_reports(reports: list[tuple[str, dict]], baseline: str = "first"):
    """Rows of (report, layer, metric, value, reference, ratio) plus plot series."""
    if not reports:
        raise ValueError("nothing to compare")
    names = [[r["name"] for r in rep["layers"]] for _, rep in reports]
    if any(sorted(n) != sorted(names[0]) for n in names):
        raise MismatchedLayers("reports do not share layer names")
    higher = dict(_SEQ_METRICS)
    ref_label, ref = reports[0]
    ref_layers = {r["name"]: r for r in ref["layers"]}
    rows = []
    for label, rep in reports:
        for rec in rep["layers"]:
            if "error" in rec:
                continue
            base = rec["dense"] if baseline == "dense" else ref_layers[rec["name"]]
            vals, refs = _layer_values(rec), _layer_values(base)
            for metric, val in vals.items():
                if metric not in refs:
                    continue
                r = _ratio(refs[metric], val, higher.get(metric, False))
                rows.append((label, rec["name"], metric, val, refs[metric], r))
    layers = names[0]
    plot = {"baseline": "dense" if baseline == "dense" else ref_label, "metrics": {}}
    for label, _ in reports:
        for _, layer, metric, _, _, r in (row for row in rows if row[0] == label):
            entry = plot["metrics"].setdefault(metric, {"x": layers, "series": {}})
            entry["series"].setdefault(label, [None] * len(layers))[layers.index(layer)] = r
    for entry in plot["metrics"].values():
        entry["series"] = [{"name": k, "y": v} for k, v in entry["series"].items()]
    return rows, plot


def cmd_compare(args) -> int:
    reports = []
    for p in args.reports:
        rep = read_report(p)
        label = Path(p).stem
        reports.append((label, rep))
    try:
        rows, plot = compare_reports(reports, args.baseline)
    except MismatchedLayers as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["report", "layer", "metric", "value", "reference", "ratio"])
    for row in rows:
        w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4]), repr(row[5])])
    _emit(buf.getvalue(), args.out)
    if args.plot:
        Path(args.plot).write_text(dumps(plot))
    return EXIT_OK


def cmd_report(args) -> int:
    rep = read_report(args.report)
    if args.out:
        Path(args.out).write_text(dumps(rep))
    if args.out and not args.summary:
        return EXIT_OK
    lines = [f"{'layer':<16} {'format':<6} {'macs':>14} {'params':>10}  perf"]
    for rec in rep["layers"]:
        if "error" in rec:
            lines.append(f"{rec['name']:<16} error: {rec['error']}")
            continue
        perf = ", ".join(
            f"{hw}: edp={p['edp']:.4g} util={p['utilization']:.3f} reorders={p['reorder_events']}"
            for hw, p in sorted(rec["perf"].items())
        )
        lines.append(
            f"{rec['name']:<16} {rec['spec']['format']:<6} {rec['cost']['total_macs']:>14} {rec['params']:>10}  {perf}"
        )
    print("\n".join(lines))
    return EXIT_OK


# validate: quick oracle properties; ``--inject-fault NAME`` corrupts one
# property's observation so the failure path can be exercised
def _check_count(rng, fault):
    from .csse import count_sequences

    specs = [
        FormatSpec("Dense", 2, [2], [2]),
        FormatSpec("TT", 2, [2], [2], [1, 2, 1]),
        FormatSpec("TT", 2, [2], [2, 2], [1, 2, 2, 1]),
        FormatSpec("TT", 2, [2, 2], [2, 2], [1, 2, 2, 2, 1]),
    ]
    for spec in specs:
        g = build_format(spec)
        got = len(stage1_search(g, 10**6, prune=False))
        if got + fault != count_sequences(len(g.nodes)):
            return False
    return True


def _check_gradients(rng, fault):
    from .training import expand_training, gradient_check

    specs = [
        FormatSpec("Dense", 3, [4], [4]),
        FormatSpec("TT", 2, [2, 3], [3, 2], [1, 2, 3, 2, 1]),
        FormatSpec("TTM", 2, [2, 3], [3, 2], [1, 3, 1]),
    ]
    for spec in specs:
        g = build_format(spec)
        w = expand_training(g, fixed_sequence(g), spec)
        err = gradient_check(w, seed=int(rng.integers(1 << 30)))
        if err + fault >= 1e-4:
            return False
    return True


def _check_order_invariance(rng, fault):
    spec = FormatSpec("TR", 2, [2, 3], [3, 2], [2, 3, 2, 3, 2])
    g = build_format(spec)
    vals = random_values(g, rng)
    ref = evaluate_numeric(g, fixed_sequence(g), vals)
    for _ in range(5):
        got = evaluate_numeric(g, random_sequence(g, rng), vals) * (1 + fault)
        if not np.allclose(got, ref, rtol=1e-6, atol=1e-9):
            return False
    return True


def _check_ce_modes(rng, fault):
    from .tcu import CE_MODES, ce_cycles, ce_stream_length, run_ce

    for _ in range(10):
        i, k, j = (int(x) for x in rng.integers(1, 5, size=3))
        a = rng.integers(-8, 9, size=(i, k))
        b = rng.integers(-8, 9, size=(k, j))
        for mode in CE_MODES:
            out, trace = run_ce(mode, a, b)
            if not np.array_equal(out + fault, a @ b):
                return False
            if trace.cycles != ce_cycles(mode, ce_stream_length(mode, i, k, j)):
                return False
    return True


def _check_fabric(rng, fault):
    from .fabric import DistributionPattern, FabricConfig, control_config, control_signals, dist_route, dist_simulate

    cfg = FabricConfig(16)
    for _ in range(20):
        sources = tuple(int(x) for x in rng.integers(0, 16, size=16))
        mux = dist_route(DistributionPattern(sources), cfg)
        if mux and dist_simulate(mux, list(range(16))) != [s + fault for s in sources]:
            return False
    for bank in range(8):
        for sel in range(8):
            got = dist_simulate(control_config(bank, sel, 8), list(range(8)))
            if got[sel] != bank + fault or len(control_signals(bank, sel, 8)) != 3:
                return False
    return True


def _check_tcu(rng, fault):
    import random as _random

    from .perf_model import enumerate_mappings, op_view
    from .tcu import run_tcu
    from .training import execute_workload, expand_training

    spec = FormatSpec("TTM", 4, [2, 4], [4, 2], [1, 4, 1])
    g = build_format(spec)
    w = expand_training(g, fixed_sequence(g), spec)
    env = {k: np.rint(v).astype(np.int64) for k, v in execute_workload(w, random_values(g, rng, integer=True)).items()}
    pick = _random.Random(int(rng.integers(1 << 30)))
    for hw in (load_hardware("fetta"), load_hardware("tpu-like")):
        for op in w.ops:
            v = op_view(w, op)
            m = pick.choice(enumerate_mappings(v, hw))
            if not np.array_equal(run_tcu(v, m, env, hw).result + fault, env[op.result]):
                return False
    return True


VALIDATORS = {
    "search_space_count": _check_count,
    "gradient_check": _check_gradients,
    "order_invariance": _check_order_invariance,
    "ce_mode_equivalence": _check_ce_modes,
    "fabric_round_trip": _check_fabric,
    "tcu_numeric_oracle": _check_tcu,
}


def run_validation(seed: int = 0, inject_fault: str | None = None) -> dict[str, bool]:
    if inject_fault is not None and inject_fault not in VALIDATORS:
        raise ParseError(f"unknown property {inject_fault!r}; choose from {sorted(VALIDATORS)}")
    results = {}
    for name, fn in VALIDATORS.items():
        rng = np.random.default_rng(seed)
        results[name] = bool(fn(rng, 1 if name == inject_fault else 0))
    return results


def cmd_validate(args) -> int:
    results = run_validation(args.seed, args.inject_fault)
    for name, ok in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if all(results.values()) else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnn-accel", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--workload", required=True, help="workload JSON path or preset name")
        sp.add_argument("--hardware", action="append", help="hardware preset or JSON path (repeatable; default fetta)")
        sp.add_argument("--metric", choices=[m.value for m in Metric], default="edp")
        sp.add_argument("--mode", choices=[m.value for m in Mode], default=None, help="override each layer's mode")
        sp.add_argument("--candidates", type=int, default=64)
        sp.add_argument("--no-prune", action="store_true")
        sp.add_argument("--jobs", type=int, default=1, help="layers processed concurrently")
        sp.add_argument("--out", help="report path (default stdout)")

    s = sub.add_parser("search", help="two-stage sequence search per layer")
    common(s)
    s.set_defaults(func=cmd_search)
    e = sub.add_parser("evaluate", help="evaluate a named sequence per layer")
    common(e)
    e.add_argument("--sequence", choices=SEQUENCE_CHOICES, default="csse")
    e.set_defaults(func=cmd_evaluate)
    c = sub.add_parser("compare", help="ratio tables across reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--baseline", choices=("first", "dense"), default="first")
    c.add_argument("--out", help="CSV path (default stdout)")
    c.add_argument("--plot", help="plot-series JSON path")
    c.set_defaults(func=cmd_compare)
    v = sub.add_parser("validate", help="run the oracle property suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", metavar="PROPERTY", help="test hook: force the named property to fail")
    v.set_defaults(func=cmd_validate)
    r = sub.add_parser("report", help="summarize or canonicalize a report")
    r.add_argument("report")
    r.add_argument("--out", help="rewrite the report canonically to this path")
    r.add_argument("--summary", action="store_true", help="print the summary even with --out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_PARSE
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (GraphError, NoLegalMapping, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EVAL
