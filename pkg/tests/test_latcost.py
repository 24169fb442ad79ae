import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynlat.errors import DomainError
from dynlat.latcost import (LatencyBreakdown, GatheredShape, TileShape, block_ops,
                            breakdowns_from_csv, breakdowns_to_csv, enumerate_tiles,
                            infer_gathered_shape, memory_efficiency, op_latency,
                            op_latency_all_tiles, op_term_table, pe_chunk_pairs,
                            predict_block_latency, predict_op_latency, static_block_latency,
                            tile_traffic)
from dynlat.model import ConvLayerSpec, preset_hardware
from dynlat.ops import FusionPlan
from dynlat.sched import block_granularities, select_block
from dynlat.simexec import random_desk_block
from oracles import brute_pe_chunk_pairs

PLANS = [FusionPlan(a, b, c) for a in (False, True) for b in (False, True) for c in (False, True)]


def test_gathered_shape_examples(block12):
    b4 = block12.with_granularity(4)
    assert infer_gathered_shape(b4, 0.5).p == 98
    assert infer_gathered_shape(b4, 0.0).p == 0
    assert infer_gathered_shape(block12.with_granularity(1), 1.0).p == 56 * 56


def test_enumerate_tiles_counts():
    tiles = enumerate_tiles(GatheredShape(98, 64, 4))
    assert len(tiles) == 8 * 7 * 3 * 3 == 504
    assert {t.t_p for t in tiles} == {1, 2, 4, 8, 16, 32, 64, 128}
    assert {t.t_s1 for t in tiles} == {1, 2, 4}
    assert enumerate_tiles(GatheredShape(1, 1, 1)) == [TileShape(1, 1, 1, 1)]
    assert enumerate_tiles(GatheredShape(98, 64, 4)) == tiles


def test_tile_shape_validation():
    with pytest.raises(DomainError):
        TileShape(3, 1, 1, 1)
    assert TileShape.parse("2x4x1x8") == TileShape(2, 4, 1, 8)
    assert str(TileShape(2, 4, 1, 8)) == "2x4x1x8"


@pytest.mark.parametrize("S, dup", [(1, Fraction(9)), (4, Fraction(9, 4)), (7, Fraction(81, 49))])
def test_halo_duplication(S, dup):
    t = 1 << (S - 1).bit_length()
    tt = tile_traffic("dyn_conv", ConvLayerSpec(8, 8, 3), TileShape(1, 8, t, t), S)
    assert tt.duplication_factor == dup


@given(st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8]), st.integers(1, 16))
def test_pointwise_has_no_duplication(a, b, S):
    assert tile_traffic("dyn_conv", ConvLayerSpec(8, 8, 1), TileShape(1, 8, a, b), S) \
        .duplication_factor == 1


def test_memory_efficiency_examples(v100):
    assert memory_efficiency(128, v100) == 1.0
    assert memory_efficiency(4, v100) == 0.03125
    assert memory_efficiency(192, v100) == 0.75


@given(st.integers(1, 100_000))
def test_memory_efficiency_range(run):
    hw = preset_hardware("v100")
    e = memory_efficiency(run, hw)
    assert 0 < e <= 1
    if run % hw.txn_bytes == 0:
        assert e == 1.0


def test_dense_conv_bounds(v100):
    layer = ConvLayerSpec(64, 64, 3)
    res = predict_op_latency("static_conv", layer, GatheredShape(1, 64, 56), 1, v100)
    bound = 115_605_504 / 7.68e12
    assert bound == pytest.approx(15.05e-6, rel=1e-3)
    assert res.compute >= bound
    assert res.off2on >= 802_816 / 700e9
    assert 802_816 / 700e9 == pytest.approx(1.147e-6, rel=1e-3)


def test_dense_conv_compute_floor_over_all_tiles(v100, block12):
    op = block_ops(block12, 1, static=True)[1]
    assert op.name == "conv2"
    _, terms = op_term_table(op, 1, v100)
    assert terms[:, 2].min() >= 115_605_504 / 7.68e12 * (1 - 1e-12)


def test_zero_patch_dynamic_op_is_free(v100):
    res = predict_op_latency("dyn_conv", ConvLayerSpec(64, 64, 3), GatheredShape(0, 64, 4), 4, v100)
    assert res.total == 0


def test_breakdown_total_is_sum():
    b = LatencyBreakdown(1.0, 2.0, 3.0, 4.0, 5.0)
    assert b.total == 15.0
    assert LatencyBreakdown.from_dict(b.to_dict()) == b


def test_breakdown_csv_round_trip(block12, v100):
    rows = predict_block_latency(block12, 0.4, v100, FusionPlan.all()).per_op
    exact = breakdowns_to_csv(rows)
    assert [(r.op, r.chosen_tile, r.total) for r in breakdowns_from_csv(exact)] == \
        [(r.op, r.chosen_tile, r.total) for r in rows]
    us = breakdowns_to_csv(rows, unit="us")
    assert breakdowns_to_csv(breakdowns_from_csv(us, unit="us"), unit="us") == us


def test_full_rate_fused_not_below_static(r101, v100):
    for bid in ("1.1", "1.2", "2.1", "3.5"):
        b = select_block(r101, bid)
        assert predict_block_latency(b, 1.0, v100, FusionPlan.all()).total >= \
            static_block_latency(b, v100)


def test_zero_rate_leaves_fixed_ops(block11, block12, v100):
    names = [o.op for o in predict_block_latency(block11, 0.0, v100).per_op]
    assert names == ["masker", "downsample", "add"]
    names = [o.op for o in predict_block_latency(block12, 0.0, v100).per_op]
    assert names == ["masker", "add"]


def test_static_latency_positive_and_consistent(r101, v100):
    for b in r101.blocks()[:5]:
        stat = static_block_latency(b, v100)
        res = predict_block_latency(b, 1.0, v100, static=True)
        assert stat > 0 and stat == res.total
        # downsample runs before conv3, whose epilogue adds the residual
        want = ["conv1", "conv2"] + (["downsample"] if b.downsample else []) + ["conv3"]
        assert [o.op for o in res.per_op] == want


def test_static_latency_scales_with_frequency(block12, v100):
    inf = float("inf")
    fast_mem = dataclasses.replace(v100, offchip_bandwidth=inf, onchip_global_bandwidth=inf,
                                   local_bandwidth_per_pe=inf)
    doubled = dataclasses.replace(fast_mem, frequency=2 * v100.frequency)
    a = static_block_latency(block12, fast_mem)
    b = static_block_latency(block12, doubled)
    assert a == pytest.approx(2 * b, rel=1e-12)


def _desk_ops(seed):
    rng = np.random.default_rng(seed)
    block = random_desk_block(rng)
    P = int(rng.integers(1, block.cells + 1))
    plan = PLANS[int(rng.integers(len(PLANS)))]
    return block, P, plan, block_ops(block, P, plan)


@given(st.integers(0, 100_000))
def test_tile_search_is_exhaustive_minimum(seed):
    hw = preset_hardware(["v100", "tx2", "nano", "gtx1080"][seed % 4])
    _, P, _, ops = _desk_ops(seed)
    for op in ops:
        tiles, totals = op_latency_all_tiles(op, P, hw)
        chosen = op_latency(op, P, hw)
        i = int(np.argmin(totals))
        assert chosen.total == totals[i] == totals.min()
        assert chosen.chosen_tile == tiles[i]
        # first-in-order tie-break
        assert all(totals[j] > totals[i] for j in range(i))


@given(st.integers(1, 400), st.integers(1, 40), st.integers(1, 100))
def test_pe_chunk_pairs_closed_form(per_chunk, n_chunks, num_pe):
    n_tiles = per_chunk * n_chunks
    pairs, last = pe_chunk_pairs(n_tiles, per_chunk, n_chunks, num_pe)
    assert (int(pairs), int(last)) == brute_pe_chunk_pairs(n_tiles, per_chunk, num_pe)


@given(st.integers(0, 100_000))
def test_op_latency_monotone_in_patches(seed):
    rng = np.random.default_rng(seed)
    block = random_desk_block(rng)
    plan = PLANS[int(rng.integers(len(PLANS)))]
    hw = preset_hardware(["v100", "nano"][seed % 2])
    prev = {}
    for P in range(block.cells + 1):
        cur = {o.op: o.total for o in predict_block_latency(block, 0, hw, plan, patches=P).per_op}
        for name, v in cur.items():
            assert v >= prev.get(name, 0.0)
        prev = cur


def test_op_latency_monotone_in_patches_real_blocks(r101, v100):
    for bid in ("1.2", "2.1"):
        block = select_block(r101, bid)
        for plan in (FusionPlan(), FusionPlan.all()):
            prev = {}
            for P in range(0, block.cells + 1, 3):
                cur = {o.op: o.total
                       for o in predict_block_latency(block, 0, v100, plan, patches=P).per_op}
                for name, v in cur.items():
                    assert v >= prev.get(name, 0.0)
                prev = cur


def _conv2_g2l(block, r, hw, policy):
    """conv2's global-to-local time at a fixed tile policy, interpolated in r."""
    expected = r * block.cells
    lo = math.floor(expected)

    def at(P):
        if P == 0:
            return 0.0
        op = next(o for o in block_ops(block, P, FusionPlan.all()) if o.name == "conv2")
        tiles, terms = op_term_table(op, P, hw)
        if policy == "min":
            return terms[:, 1].min()
        _, C, A, B = op.out_dims(P)
        whole = (tiles[:, 0] == 1) & (tiles[:, 1] >= C) & (tiles[:, 2] >= A) & (tiles[:, 3] >= B)
        return terms[np.flatnonzero(whole)[0], 1]

    f = expected - lo
    return (1 - f) * at(lo) + f * at(lo + 1)


@pytest.mark.parametrize("policy", ["min", "patch"])
@pytest.mark.parametrize("hw_name", ["v100", "tx2"])
def test_g2l_non_increasing_in_granularity(r101, policy, hw_name):
    hw = preset_hardware(hw_name)
    for bid in ("1.2", "2.2"):
        block = select_block(r101, bid)
        for r in (0.3, 0.5, 0.7):
            g = [_conv2_g2l(block.with_granularity(S), r, hw, policy)
                 for S in block_granularities(block)]
            assert all(b <= a * (1 + 1e-12) for a, b in zip(g, g[1:]))


@given(st.integers(0, 100_000))
def test_off2on_counts_each_tensor_once(seed):
    hw = preset_hardware("v100")
    _, P, _, ops = _desk_ops(seed)
    for op in ops:
        sizes = {a.tensor: a.elements(P) for a in op.inputs}
        got = op_latency(op, P, hw).bytes.off2on
        assert got == (sum(sizes.values()) + op.weight_elements) * 4
        for a in op.inputs:
            if a.layout != "compact":
                assert a.elements(P) == a.channels * a.h * a.w


def test_rate_interpolates_between_counts(block12, v100):
    b = block12.with_granularity(4)
    lo = predict_block_latency(b, 0, v100, patches=19).total
    hi = predict_block_latency(b, 0, v100, patches=20).total
    mid = predict_block_latency(b, 19.5 / b.cells, v100).total
    assert mid == pytest.approx(0.5 * (lo + hi), rel=1e-12)


def test_rate_domain(block12, v100):
    with pytest.raises(DomainError):
        predict_block_latency(block12, -0.1, v100)
