import numpy as np
import pytest

from dynlat import sched
from dynlat.errors import DomainError, NotFoundError
from dynlat.latcost import predict_block_latency, static_block_latency
from dynlat.model import preset_hardware
from dynlat.ops import FusionPlan, rewrite_block
from dynlat.sched import (SweepResult, ablation_plans, block_granularities, choose_granularity,
                          compute_r_th, decide_fusion, default_r_grid, fusion_ablation,
                          network_latency, select_block, stage_latency, sweep_r, sweep_s)


def test_rewrite_op_counts(block12):
    assert len(rewrite_block(block12, FusionPlan(), patches=5)) == 7
    fused = rewrite_block(block12, FusionPlan.all(), patches=5)
    assert [op.name for op in fused] == ["masker_conv1", "conv2", "conv3", "scatter_add"]
    assert len(rewrite_block(block12, FusionPlan(False, False, True), patches=5)) == 6


def test_r_th_sign_change(block12, v100):
    th = compute_r_th(block12, 4, v100)
    assert th.status == "crossing" and 0 < th.value < 1
    b = block12.with_granularity(4)

    def gap(r):
        return (predict_block_latency(b, r, v100, FusionPlan(True, True, True)).total
                - predict_block_latency(b, r, v100, FusionPlan(False, True, True)).total)

    assert gap(th.value - 0.01) > 0 > gap(th.value + 0.01)


@pytest.fixture
def fake_gap(monkeypatch):
    def install(fn):
        monkeypatch.setattr(sched, "_fusion_gap", lambda block, hw, r: fn(r))
        sched._r_th.cache_clear()
    yield install
    sched._r_th.cache_clear()


def test_r_th_always(fake_gap, block12, v100):
    fake_gap(lambda r: -1.0)
    assert compute_r_th(block12, None, v100) == (0.0, "always")


def test_r_th_never(fake_gap, block12, v100):
    fake_gap(lambda r: 1.0)
    th = compute_r_th(block12, None, v100)
    assert th == (None, "never")
    assert not decide_fusion(block12, None, 1.0, v100).fuse_masker_conv1


def test_r_th_non_monotone_falls_back_to_grid(fake_gap, block12, v100):
    # bisection lands in a spurious window narrower than the sign-check step;
    # fused only wins for good from 0.6
    fake_gap(lambda r: -1.0 if (0.495 < r < 0.505 or r >= 0.6) else 1.0)
    th = compute_r_th(block12, None, v100)
    assert th.status == "crossing"
    assert th.value == pytest.approx(0.6)


def test_decide_fusion_extremes(block12, v100):
    assert decide_fusion(block12, 4, 1.0, v100).fuse_masker_conv1
    assert not decide_fusion(block12, 4, 0.0, v100).fuse_masker_conv1
    plan = decide_fusion(block12, 4, 0.5, v100)
    assert plan.fuse_gather_conv and plan.fuse_scatter_add
    with pytest.raises(DomainError):
        decide_fusion(block12, 4, 1.2, v100)


@pytest.mark.parametrize("hw_name", ["v100", "tx2"])
def test_decided_plan_never_worse_than_both(r101, hw_name):
    hw = preset_hardware(hw_name)
    for bid in ("1.2", "2.1"):
        block = select_block(r101, bid)
        for S in block_granularities(block)[::2]:
            b = block.with_granularity(S)
            for r in np.linspace(0, 1, 11):
                chosen = predict_block_latency(b, r, hw, decide_fusion(b, None, r, hw)).total
                fused = predict_block_latency(b, r, hw, FusionPlan(True, True, True)).total
                unfused = predict_block_latency(b, r, hw, FusionPlan(False, True, True)).total
                assert chosen <= max(fused, unfused)
                assert chosen == pytest.approx(min(fused, unfused), rel=0.05)


def test_sweep_r_shape_and_points(block12, v100):
    res = sweep_r(block12, 8, v100, default_r_grid(0.05), block_id="1.2")
    assert len(res.points) == 21
    assert res.points[0].l_dyn == min(p.l_dyn for p in res.points)
    assert res.points[-1].r_l >= 1
    for p in res.points:
        assert p.r_l == p.l_dyn / p.l_stat


def test_small_granularity_harms_latency(block12, v100):
    grid = default_r_grid(0.05)
    fine = sweep_r(block12, 1, v100, grid)
    coarse = sweep_r(block12, 8, v100, grid)
    assert all(c.r_l <= f.r_l for f, c in zip(fine.points, coarse.points))


def test_sweep_r_grid_checked(block12, v100):
    with pytest.raises(DomainError):
        sweep_r(block12, 8, v100, [0.5, 1.5])


def test_sweep_s(block12, v100):
    res = sweep_s(block12, 0.5, v100)
    xs = [p.x for p in res.points]
    assert xs == [1, 2, 4, 7, 8, 14, 28]
    assert all(b.r_l <= a.r_l for a, b in zip(res.points, res.points[1:]))


def test_sweep_s_single_candidate(r101, v100):
    res = sweep_s(select_block(r101, "4.2"), 0.5, v100)
    assert [p.x for p in res.points] == [1]


def test_sweep_serialization_round_trip(block12, v100):
    res = sweep_r(block12, 4, v100, default_r_grid(0.1), "1.2")
    text = res.to_csv()
    assert text.splitlines()[0] == "x,l_dyn_us,l_stat_us,r_l"
    assert SweepResult.from_csv(text, "r").to_csv() == text
    assert SweepResult.from_dict(res.to_dict()) == res
    with pytest.raises(DomainError):
        SweepResult("q", ())


def test_network_static_equivalence(r101, v100):
    lat = network_latency(r101, [1.0] * r101.num_blocks, v100, maskers=False)
    assert lat.speedup == 0.0
    assert lat.total == lat.static_total
    assert lat.static_total == lat.stem_head + sum(static_block_latency(b, v100)
                                                   for b in r101.blocks())


def test_network_total_is_additive(r101, v100):
    rng = np.random.default_rng(0)
    lat = network_latency(r101, rng.random(r101.num_blocks), v100)
    assert lat.total == lat.stem_head + sum(lat.per_block)
    assert len(lat.plans) == r101.num_blocks
    with pytest.raises(DomainError):
        network_latency(r101, [0.5], v100)


def test_ablation_table(block12, v100):
    rows = fusion_ablation(block12, 4, 0.6, v100)
    assert [r.label for r in rows] == [label for label, _ in ablation_plans()]
    lat = [r.latency for r in rows]
    assert all(a > b for a, b in zip(lat, lat[1:]))
    assert rows == fusion_ablation(block12, 4, 0.6, v100)


def test_ablation_at_zero_rate(block12, v100):
    rows = fusion_ablation(block12, 4, 0.0, v100)
    # with nothing selected, gather fusion has nothing to act on
    assert rows[1].latency == rows[2].latency
    # scatter-add fusion removes the residual copy and nothing else
    b = block12.with_granularity(4)
    unfused_scatter = predict_block_latency(b, 0.0, v100, rows[2].plan).per_op
    copy = next(o for o in unfused_scatter if o.op == "add")
    assert rows[3].latency == pytest.approx(rows[2].latency - copy.total, rel=1e-12)


def test_select_block_errors(r101):
    with pytest.raises(NotFoundError):
        select_block(r101, "9.9")


def test_choose_granularity(r101, v100):
    rates = [0.5] * r101.num_blocks
    s_net = choose_granularity(r101, v100, rates)
    assert s_net[-1] == 1
    assert s_net[0] > s_net[-1]
    pos = 0
    for i, blocks in r101.iter_stage_blocks():
        stage_rates = rates[pos:pos + len(blocks)]
        pos += len(blocks)
        cands = block_granularities(blocks[0])
        if i == len(r101.stages) - 1:
            continue
        best = min(stage_latency(blocks, stage_rates, s, v100) for s in cands)
        assert stage_latency(blocks, stage_rates, s_net[i], v100) <= best * 1.02


def test_choose_granularity_tie_prefers_smallest(monkeypatch, r101, v100):
    monkeypatch.setattr(sched, "stage_latency", lambda *a, **k: 1.0)
    assert choose_granularity(r101, v100, [0.5] * r101.num_blocks) == (1, 1, 1, 1)
