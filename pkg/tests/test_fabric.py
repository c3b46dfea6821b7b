import itertools
import json

import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tnn_accel.fabric import (
    IDLE,
    DistributionPattern,
    FabricConfig,
    FabricKind,
    MuxConfig,
    ReductionPattern,
    SwitchConfig,
    SwitchMode,
    brute_force_permutations,
    control_config,
    control_signals,
    dist_route,
    dist_simulate,
    fabric_cost,
    red_route,
    red_simulate,
    route_trace,
    transpose_perm,
)

DIST16 = FabricConfig(16)
RED16 = FabricConfig(16, FabricKind.REDUCTION)


@st.composite
def mux_configs(draw, n=16):
    levels = n.bit_length() - 1
    stages = tuple(tuple(draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))) for _ in range(levels))
    return MuxConfig(n, stages, draw(st.booleans()))


@st.composite
def reduction_patterns(draw, n=16):
    ports = draw(st.permutations(range(n)))
    cut = sorted(draw(st.lists(st.integers(1, n - 1), max_size=6, unique=True)))
    bounds = [0, *cut, n]
    groups = [tuple(ports[a:b]) for a, b in itertools.pairwise(bounds)]
    dests = draw(st.permutations(range(n)))[: len(groups)]
    return ReductionPattern(tuple(zip(groups, dests)), n)


class TestConfig:
    def test_stage_count(self):
        assert FabricConfig(16).stages == 5
        assert FabricConfig(2).stages == 2

    @pytest.mark.parametrize("n", [0, 1, 3, 12])
    def test_bad_port_count(self, n):
        with pytest.raises(ValueError):
            FabricConfig(n)

    def test_vector_lengths_checked(self):
        with pytest.raises(ValueError):
            MuxConfig(8, ((0,) * 8, (0,) * 8))
        with pytest.raises(ValueError):
            SwitchConfig(8, ((SwitchMode.PASS,) * 3,) * 3)

    def test_hardware_cost(self):
        for n in (4, 8, 16, 64):
            lg = n.bit_length() - 1
            c = fabric_cost(n)
            assert c["dist_muxes"] == n * (lg + 1)
            assert c["red_adder_switches"] == (n // 2) * lg
            assert c["crossbar_points"] == n * n


class TestDistribution:
    def test_identity_straight(self):
        mux = dist_route(DistributionPattern(tuple(range(16))), DIST16)
        assert mux and not mux.transpose
        assert all(bit == 0 for stage in mux.stages for bit in stage)

    def test_broadcast(self):
        mux = dist_route(DistributionPattern((0,) * 16), DIST16)
        assert mux
        assert dist_simulate(mux, list(range(16))) == [0] * 16

    def test_straight_is_identity(self):
        assert dist_simulate(MuxConfig.straight(16), list("abcdefghijklmnop")) == list("abcdefghijklmnop")

    @pytest.mark.parametrize("n", [4, 8, 16, 64])
    def test_transpose_layer_alone(self, n):
        out = dist_simulate(MuxConfig.straight(n, transpose=True), list(range(n)))
        dest = oracles.corner_turn(n)
        assert transpose_perm(n) == dest
        assert all(out[dest[i]] == i for i in range(n))

    def test_congesting_permutation_unroutable(self):
        reachable = brute_force_permutations(8, False) | brute_force_permutations(8, True)
        blocked = next(p for p in itertools.permutations(range(8)) if p not in reachable)
        assert not dist_route(DistributionPattern(blocked), FabricConfig(8))

    @given(mux_configs())
    def test_round_trip(self, mux):
        sources = tuple(dist_simulate(mux, list(range(16))))
        routed = dist_route(DistributionPattern(sources), DIST16)
        assert routed
        assert dist_simulate(routed, list(range(16))) == list(sources)

    @given(st.lists(st.one_of(st.none(), st.integers(0, 15)), min_size=16, max_size=16))
    def test_routed_patterns_deliver(self, sources):
        p = DistributionPattern(tuple(sources))
        mux = dist_route(p, DIST16)
        if mux:
            got = dist_simulate(mux, list(range(16)))
            assert all(s is None or got[i] == s for i, s in enumerate(sources))

    @given(st.lists(st.integers(0, 15), min_size=16, max_size=16))
    def test_transposable_superset(self, sources):
        p = DistributionPattern(tuple(sources))
        if dist_route(p, DIST16, transpose=False):
            assert dist_route(p, DIST16)

    def test_wrong_kind(self):
        with pytest.raises(ValueError):
            dist_route(DistributionPattern(tuple(range(16))), RED16)


class TestReduction:
    def test_all_pass(self):
        p = ReductionPattern(tuple(((i,), i) for i in range(16)), 16)
        sw = red_route(p, RED16)
        assert sw
        assert red_simulate(sw, list(range(16))) == list(range(16))

    def test_tree_sum(self):
        p = ReductionPattern(((tuple(range(16)), 5),), 16)
        sw = red_route(p, RED16)
        vals = [3 * i + 1 for i in range(16)]
        out = red_simulate(sw, vals)
        assert out[5] == sum(vals)
        assert all(v is IDLE for k, v in enumerate(out) if k != 5)

    def test_pairwise_groups(self):
        p = ReductionPattern(tuple(((2 * i, 2 * i + 1), i) for i in range(8)), 16)
        sw = red_route(p, RED16)
        assert sw
        # first-stage adders fold each pair toward the side holding the destination's low bit
        for i, mode in enumerate(sw.stages[0]):
            assert mode == (SwitchMode.ADD_RIGHT if i % 2 else SwitchMode.ADD_LEFT)
        vals = list(range(10, 26))
        out = red_simulate(sw, vals)
        assert [out[i] for i in range(8)] == [vals[2 * i] + vals[2 * i + 1] for i in range(8)]

    def test_passthrough_identity(self):
        assert red_simulate(SwitchConfig.passthrough(8), list(range(8))) == list(range(8))

    def test_single_add_left(self):
        modes = ((SwitchMode.ADD_LEFT,),)
        out = red_simulate(SwitchConfig(2, modes), [3, 5])
        assert out[0] == 8 and out[1] is IDLE

    @given(reduction_patterns())
    def test_group_sums(self, p):
        sw = red_route(p, RED16)
        if not sw:
            return
        vals = [7 * i - 20 for i in range(16)]
        out = red_simulate(sw, vals)
        for dest, total in oracles.group_sums(vals, p.groups).items():
            assert out[dest] == total

    def test_aligned_blocks_routable(self):
        # contiguous aligned blocks always fold inside their own subtree
        p = ReductionPattern(((tuple(range(4)), 0), (tuple(range(4, 8)), 4), (tuple(range(8, 16)), 8)), 16)
        assert red_route(p, RED16)

    def test_invalid_patterns(self):
        with pytest.raises(ValueError):
            ReductionPattern((((0, 1), 0), ((1, 2), 1)), 4)
        with pytest.raises(ValueError):
            ReductionPattern((((0,), 0), ((1,), 0)), 4)

    def test_idle_marker_is_additive_identity(self):
        assert IDLE + 4 == 4 and 4 + IDLE == 4
        assert repr(IDLE) == "IDLE"


class TestControl:
    def test_zero_sel_keeps_bank_bits(self):
        assert control_signals(0b1011, 0, 16) == (1, 1, 0, 1)

    def test_xor_identity(self):
        assert control_signals(0b101, 0b101, 8) == (0, 0, 0)

    def test_law_exhaustive_n8(self):
        for bank in range(8):
            for sel in range(8):
                bits = control_signals(bank, sel, 8)
                assert bits == tuple(((bank ^ sel) >> s) & 1 for s in range(3))
                out = dist_simulate(control_config(bank, sel, 8), list(range(8)))
                assert out[sel] == bank

    def test_range_checked(self):
        with pytest.raises(ValueError):
            control_signals(16, 0, 16)


def test_trace_dump():
    mux = dist_route(DistributionPattern(tuple(range(15, -1, -1))), DIST16)
    data = json.loads(route_trace(mux, list(range(16))))
    assert data["kind"] == "distribution"
    assert data["stages"][-1]["values"] == list(range(15, -1, -1))
    sw = red_route(ReductionPattern(((tuple(range(16)), 0),), 16), RED16)
    data = json.loads(route_trace(sw, [1] * 16))
    assert data["stages"][-1]["values"][0] == 16
