import json
import math
from pathlib import Path

import numpy as np
import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tnn_accel.graph import ContractionSequence, Dim, TensorGraph, TensorNode, evaluate_numeric
from tnn_accel.hardware import PRESETS
from tnn_accel.perf_model import Mapping, NoLegalMapping, OpView, enumerate_mappings
from tnn_accel.tcu import (
    CE_MODES,
    CeMode,
    IbPath,
    Stationarity,
    TileTooLarge,
    ce_cycles,
    ce_cycles_general,
    ce_stream_length,
    run_ce,
    run_ce_tiles,
    run_tcu,
)

GOLDEN = Path(__file__).parent / "golden"
WS = CeMode(Stationarity.WS, IbPath.VERTICAL, "a")
WS_H = CeMode(Stationarity.WS, IbPath.HORIZONTAL, "a")
OS_A = CeMode(Stationarity.OS, IbPath.VERTICAL, "a")


def view(a_dims, b_dims, sizes, name="op"):
    a_set, b_set = set(a_dims), set(b_dims)
    out = tuple(d for d in a_dims if d not in b_set) + tuple(d for d in b_dims if d not in a_set)
    return OpView(name, "FP", "A", "B", "C", tuple(a_dims), tuple(b_dims), out, tuple(sorted(sizes.items())))


def reference(v: OpView, values):
    """Contraction of the op through the graph evaluator, in the op's output order."""
    table = {d: Dim(d, s) for d, s in v.sizes}
    g = TensorGraph({"A": TensorNode("A", v.a_dims), "B": TensorNode("B", v.b_dims)}, table)
    out = evaluate_numeric(g, ContractionSequence.from_pairs(g, [("A", "B")]), values)
    order = sorted(v.out_dims)
    return np.rint(np.transpose(out, [order.index(d) for d in v.out_dims])).astype(np.int64)


def int_values(v: OpView, rng):
    s = v.size_map
    return {
        "A": rng.integers(-5, 6, size=[s[d] for d in v.a_dims]),
        "B": rng.integers(-5, 6, size=[s[d] for d in v.b_dims]),
    }


class TestCe:
    def test_scalar_all_modes(self):
        for mode in CE_MODES:
            out, _ = run_ce(mode, np.array([[3]]), np.array([[-4]]))
            assert out.tolist() == [[-12]]

    def test_random_4x4x4_all_modes(self):
        rng = np.random.default_rng(11)
        a, b = rng.integers(-9, 10, size=(4, 4)), rng.integers(-9, 10, size=(4, 4))
        ref = oracles.matmul_loops(a, b)
        for mode in CE_MODES:
            out, _ = run_ce(mode, a, b)
            np.testing.assert_array_equal(out, ref)

    def test_ws_golden_trace(self):
        want = json.loads((GOLDEN / "ws_4x4x4_trace.json").read_text())
        rng = np.random.default_rng(0)
        _, trace = run_ce(WS, rng.integers(-3, 4, size=(4, 4)), rng.integers(-3, 4, size=(4, 4)))
        got = json.loads(trace.to_json())
        assert got["cycles"] == want["cycles"] == ce_cycles(WS, 4)
        assert got["activity_per_cycle"] == want["activity_per_cycle"]
        assert sorted(got["emissions"]) == want["emissions"]
        # utilization of the lone tile: 64 MACs over 16 PEs x 15 cycles
        assert trace.busy_macs / (16 * trace.cycles) == pytest.approx(4 / 15)

    def test_tile_too_large(self):
        with pytest.raises(TileTooLarge):
            run_ce(WS, np.ones((2, 5)), np.ones((5, 2)))
        with pytest.raises(TileTooLarge):
            run_ce(OS_A, np.ones((5, 2)), np.ones((2, 2)))

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            CeMode(Stationarity.WS, IbPath.VERTICAL, "b")
        with pytest.raises(ValueError):
            CeMode(Stationarity.OS, IbPath.HORIZONTAL, "a")

    def test_six_distinct_modes(self):
        assert len({m.name for m in CE_MODES}) == 6

    @given(
        st.sampled_from(CE_MODES),
        st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4),
        st.integers(0, 2**31 - 1),
    )
    def test_multi_tile_closed_form(self, mode, shapes, seed):
        rng = np.random.default_rng(seed)
        # stationary dims shared by the sequence, stream dim free per tile
        i0, k0, j0 = shapes[0]
        tiles, streams = [], []
        for i, k, j in shapes:
            if mode.stationarity == Stationarity.WS:
                k, j = k0, j0
            elif mode.stationarity == Stationarity.IS:
                k, i = k0, i0
            else:
                i, j = i0, j0
            tiles.append((rng.integers(-4, 5, size=(i, k)), rng.integers(-4, 5, size=(k, j))))
            streams.append(ce_stream_length(mode, i, k, j))
        outs, trace = run_ce_tiles(mode, tiles)
        for (a, b), out in zip(tiles, outs):
            np.testing.assert_array_equal(out, a @ b)
        assert trace.cycles == ce_cycles_general(mode, streams)
        assert trace.busy_macs == sum(a.shape[0] * a.shape[1] * b.shape[1] for a, b in tiles)
        assert len(trace.emissions) == sum(a.shape[0] * b.shape[1] for a, b in tiles)

    def test_equal_streams_match_uniform_form(self):
        for mode in CE_MODES:
            for t in (1, 3, 4, 9):
                assert ce_cycles_general(mode, [t] * 3) == ce_cycles(mode, t, 3)


class TestTcu:
    def test_single_ce_equals_run_ce(self):
        v = view((0, 1), (1, 2), {0: 4, 1: 4, 2: 4})
        rng = np.random.default_rng(2)
        vals = int_values(v, rng)
        m = Mapping(WS, (1,), (2,), ())
        res = run_tcu(v, m, vals, PRESETS["fetta"])
        out, trace = run_ce(WS, vals["A"], vals["B"])
        np.testing.assert_array_equal(res.result, out)
        assert res.per_ce_cycles == [trace.cycles]
        assert res.cycles >= trace.cycles

    def test_reduction_split_over_four_ces(self):
        v = view((0, 1, 3), (1, 3, 2), {0: 4, 1: 4, 2: 4, 3: 4})
        m = Mapping(WS, (3,), (2,), (1,))
        assert m.reduces_across_ces(v)
        vals = int_values(v, np.random.default_rng(3))
        res = run_tcu(v, m, vals, PRESETS["fetta"])
        np.testing.assert_array_equal(res.result, reference(v, vals))
        assert len(res.per_ce_cycles) == 4

    def test_split_reduction_needs_flexible_reduction(self):
        v = view((0, 1, 3), (1, 3, 2), {0: 4, 1: 4, 2: 4, 3: 4})
        m = Mapping(WS, (3,), (2,), (1,))
        hw = PRESETS["fetta"].with_flags(flexible_reduction=False)
        with pytest.raises(NoLegalMapping):
            run_tcu(v, m, int_values(v, np.random.default_rng(0)), hw)

    def test_fetch_ceiling_stalls(self):
        # 16 CEs each pull 4 IA and 4 IB elements per cycle: 128 wanted, 64 fetched
        v = view((0, 1, 3), (1, 3, 2), {0: 4, 1: 16, 2: 4, 3: 4})
        m = Mapping(OS_A, (0,), (2,), (1,))
        vals = int_values(v, np.random.default_rng(4))
        res = run_tcu(v, m, vals, PRESETS["fetta"])
        np.testing.assert_array_equal(res.result, reference(v, vals))
        assert res.stall == pytest.approx(128 / 64)
        assert res.cycles >= 2 * max(res.per_ce_cycles)

    def test_transpose_absorbed_on_transposable_ce(self):
        v = view((0, 1), (1, 2), {0: 4, 1: 4, 2: 4})
        m = Mapping(WS_H, (1,), (2,), ())
        vals = int_values(v, np.random.default_rng(5))
        res = run_tcu(v, m, vals, PRESETS["fetta"])
        np.testing.assert_array_equal(res.result, reference(v, vals))
        assert res.extra_dram_bytes == 0
        with pytest.raises(NoLegalMapping):
            run_tcu(v, m, vals, PRESETS["fetta"].with_flags(transposable_ce=False))

    def test_psum_conservation(self):
        # K = 16 split as a 4-wide row group plus a temporal dim of 4
        v = view((0, 1, 3), (1, 3, 2), {0: 4, 1: 4, 2: 4, 3: 4})
        vals = int_values(v, np.random.default_rng(6))
        ws = run_tcu(v, Mapping(WS, (3,), (2,), ()), vals, PRESETS["fetta"])
        assert ws.spill_factor == 4
        assert ws.emissions == 16 * 4
        os_ = run_tcu(v, Mapping(OS_A, (0,), (2,), ()), vals, PRESETS["fetta"])
        assert os_.spill_factor == 1
        assert os_.emissions == 16

    def test_unpacks_as_pair(self):
        v = view((0, 1), (1, 2), {0: 2, 1: 3, 2: 2})
        vals = int_values(v, np.random.default_rng(7))
        result, cycles = run_tcu(v, Mapping(WS, (1,), (2,), ()), vals, PRESETS["fetta"])
        np.testing.assert_array_equal(result, reference(v, vals))
        assert cycles > 0

    @pytest.mark.parametrize("hw", sorted(PRESETS))
    def test_every_mapping_of_small_op(self, hw):
        v = view((0, 1, 3), (3, 1, 2), {0: 2, 1: 4, 2: 3, 3: 2})
        vals = int_values(v, np.random.default_rng(8))
        ref = reference(v, vals)
        for m in enumerate_mappings(v, PRESETS[hw]):
            np.testing.assert_array_equal(run_tcu(v, m, vals, PRESETS[hw]).result, ref)

    def test_cycles_cover_compute(self):
        v = view((0, 1), (1, 2), {0: 8, 1: 8, 2: 8})
        vals = int_values(v, np.random.default_rng(9))
        for m in enumerate_mappings(v, PRESETS["fetta"])[:20]:
            res = run_tcu(v, m, vals, PRESETS["fetta"])
            assert res.cycles >= max(res.per_ce_cycles)
            assert res.cycles >= math.ceil(v.macs / PRESETS["fetta"].total_macs)
