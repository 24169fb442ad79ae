"""Scheduling decisions on top of the latency model.

Fusion selection (with the masker threshold), activation-rate and
granularity sweeps, cumulative fusion ablation, network aggregation and
per-stage granularity choice.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

from .errors import DomainError, NotFoundError
from .latcost import op_latency, predict_block_latency, static_block_latency
from .model import BlockSpec, HardwareSpec, NetworkSpec, valid_granularities
from .ops import FusionPlan, rewrite_block, static_layer_op

R_TH_TOL = 1e-4
SCAN_STEP = 0.01
GRANULARITY_TOLERANCE = 0.02

__all__ = [
    "FusionPlan", "rewrite_block", "RThreshold", "compute_r_th", "decide_fusion",
    "SweepPoint", "SweepResult", "sweep_r", "sweep_s", "NetworkLatency", "network_latency",
    "AblationRow", "fusion_ablation", "choose_granularity", "select_block", "ablation_plans",
]


class RThreshold(NamedTuple):
    """Masker-fusion threshold.

    ``status`` is ``"crossing"`` (fused wins from ``value`` upward),
    ``"always"`` (fused already wins at r=0, ``value`` = 0) or ``"never"``
    (unfused still wins at r=1, ``value`` is None).
    """

    value: float | None
    status: str


def _plan(masker: bool) -> FusionPlan:
    return FusionPlan(masker, True, True)


def _fusion_gap(block: BlockSpec, hw: HardwareSpec, r: float) -> float:
    """Fused minus unfused masker latency; negative where fusing wins."""
    return (predict_block_latency(block, r, hw, _plan(True)).total
            - predict_block_latency(block, r, hw, _plan(False)).total)


@lru_cache(maxsize=4096)
def _r_th(block: BlockSpec, hw: HardwareSpec) -> RThreshold:
    gap = lambda r: _fusion_gap(block, hw, r)  # noqa: E731
    if gap(0.0) <= 0:
        return RThreshold(0.0, "always")
    if gap(1.0) > 0:
        return RThreshold(None, "never")
    lo, hi = 0.0, 1.0
    while hi - lo > R_TH_TOL:
        mid = 0.5 * (lo + hi)
        if gap(mid) <= 0:
            hi = mid
        else:
            lo = mid
    r = hi
    if gap(max(0.0, r - SCAN_STEP)) > 0 and gap(min(1.0, r + SCAN_STEP)) < 0:
        return RThreshold(r, "crossing")
    # the gap is not monotone here: take the last upward crossing on a fixed grid
    n = int(round(1 / SCAN_STEP))
    grid = [i / n for i in range(n + 1)]
    signs = [gap(x) <= 0 for x in grid]
    first = n
    while first > 0 and signs[first - 1]:
        first -= 1
    return RThreshold(grid[first], "crossing")


def compute_r_th(block: BlockSpec, S: int | None, hw: HardwareSpec) -> RThreshold:
    if S is not None:
        block = block.with_granularity(S)
    return _r_th(block, hw)


def decide_fusion(block: BlockSpec, S: int | None, expected_r: float, hw: HardwareSpec) -> FusionPlan:
    if not 0 <= expected_r <= 1:
        raise DomainError(f"expected rate {expected_r} outside [0, 1]")
    th = compute_r_th(block, S, hw)
    fuse = th.value is not None and expected_r > th.value
    return FusionPlan(fuse, True, True, r_th=th.value)


# -- sweeps ---------------------------------------------------------------------

class SweepPoint(NamedTuple):
    x: float
    l_dyn: float
    l_stat: float
    r_l: float


SWEEP_COLUMNS = ("x", "l_dyn_us", "l_stat_us", "r_l")


@dataclass(frozen=True)
class SweepResult:
    axis: str
    points: tuple[SweepPoint, ...]
    block_id: str = ""
    hw_name: str = ""

    def __post_init__(self):
        if self.axis not in ("r", "S"):
            raise DomainError(f"sweep axis must be 'r' or 'S', got {self.axis!r}")
        object.__setattr__(self, "points", tuple(SweepPoint(*p) for p in self.points))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for p in self.points:
            x = f"{p.x:g}" if self.axis == "r" else str(int(p.x))
            w.writerow([x, f"{p.l_dyn * 1e6:.3f}", f"{p.l_stat * 1e6:.3f}", f"{p.r_l:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, axis: str, block_id: str = "", hw_name: str = "") -> "SweepResult":
        pts = [SweepPoint(float(r["x"]), float(r["l_dyn_us"]) / 1e6, float(r["l_stat_us"]) / 1e6,
                          float(r["r_l"]))
               for r in csv.DictReader(io.StringIO(text))]
        return cls(axis, tuple(pts), block_id, hw_name)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "block_id": self.block_id, "hw_name": self.hw_name,
                "points": [p._asdict() for p in self.points]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(d["axis"], tuple(SweepPoint(**p) for p in d["points"]),
                   d.get("block_id", ""), d.get("hw_name", ""))


def _point(x: float, block: BlockSpec, r: float, hw: HardwareSpec) -> SweepPoint:
    plan = decide_fusion(block, None, r, hw)
    l_dyn = predict_block_latency(block, r, hw, plan).total
    l_stat = static_block_latency(block, hw)
    return SweepPoint(x, l_dyn, l_stat, l_dyn / l_stat)


def sweep_r(block: BlockSpec, S: int | None, hw: HardwareSpec, r_grid: Sequence[float],
            block_id: str = "") -> SweepResult:
    if S is not None:
        block = block.with_granularity(S)
    for r in r_grid:
        if not 0 <= r <= 1:
            raise DomainError(f"grid rate {r} outside [0, 1]")
    return SweepResult("r", tuple(_point(float(r), block, r, hw) for r in r_grid),
                       block_id, hw.name)


def block_granularities(block: BlockSpec) -> list[int]:
    return valid_granularities(math.gcd(block.output_h, block.output_w))


def sweep_s(block: BlockSpec, r: float, hw: HardwareSpec, block_id: str = "") -> SweepResult:
    if not 0 <= r <= 1:
        raise DomainError(f"rate {r} outside [0, 1]")
    pts = tuple(_point(float(s), block.with_granularity(s), r, hw)
                for s in block_granularities(block))
    return SweepResult("S", pts, block_id, hw.name)


def default_r_grid(step: float = 0.05) -> list[float]:
    n = int(round(1 / step))
    return [round(i * step, 10) for i in range(n + 1)]


# -- networks -------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkLatency:
    total: float
    per_block: tuple[float, ...]
    stem_head: float
    static_total: float
    plans: tuple[FusionPlan, ...]

    @property
    def speedup(self) -> float:
        return 1.0 - self.total / self.static_total

    def to_dict(self, block_ids: Sequence[str] | None = None) -> dict:
        ids = list(block_ids) if block_ids is not None else [str(i) for i in range(len(self.per_block))]
        return {
            "total_s": self.total, "static_total_s": self.static_total,
            "stem_head_s": self.stem_head, "speedup": self.speedup,
            "blocks": [{"block": b, "latency_s": l, "plan": asdict(p)}
                       for b, l, p in zip(ids, self.per_block, self.plans)],
        }


def stem_head_latency(net: NetworkSpec, hw: HardwareSpec) -> float:
    return sum(op_latency(static_layer_op(l), 1, hw).total for l in net.stem_and_head)


def network_latency(net: NetworkSpec, rates: Sequence[float], hw: HardwareSpec, *,
                    maskers: bool = True) -> NetworkLatency:
    """Sum of per-block latencies (fusion decided per block) plus dense stem/head.

    Without maskers a fully active block runs as its plain static schedule.
    """
    rates = list(rates)
    blocks = net.blocks()
    if len(rates) != len(blocks):
        raise DomainError(f"{len(rates)} rates for {len(blocks)} blocks")
    stem_head = stem_head_latency(net, hw)
    per_block, plans = [], []
    for block, r in zip(blocks, rates):
        if not maskers and r == 1:
            plan = FusionPlan()
            lat = static_block_latency(block, hw)
        else:
            plan = decide_fusion(block, None, r, hw)
            lat = predict_block_latency(block, r, hw, plan, masker=maskers).total
        per_block.append(lat)
        plans.append(plan)
    static_total = stem_head + sum(static_block_latency(b, hw) for b in blocks)
    total = stem_head + sum(per_block)
    return NetworkLatency(total, tuple(per_block), stem_head, static_total, tuple(plans))


def select_block(net: NetworkSpec, block_id: str) -> BlockSpec:
    """Look up a block by its ``"stage.block"`` id (both 1-based)."""
    ids = net.block_ids()
    if block_id not in ids:
        raise NotFoundError(f"no block {block_id!r} in {net.name} (have {ids[0]}..{ids[-1]})")
    return net.blocks()[ids.index(block_id)]


# -- ablation and granularity ----------------------------------------------------

class AblationRow(NamedTuple):
    label: str
    plan: FusionPlan
    latency: float


def ablation_plans() -> list[tuple[str, FusionPlan]]:
    return [
        ("none", FusionPlan(False, False, False)),
        ("+masker-conv1", FusionPlan(True, False, False)),
        ("+gather-conv", FusionPlan(True, True, False)),
        ("+scatter-add", FusionPlan(True, True, True)),
    ]


def fusion_ablation(block: BlockSpec, S: int | None, r: float, hw: HardwareSpec) -> list[AblationRow]:
    if S is not None:
        block = block.with_granularity(S)
    return [AblationRow(label, plan, predict_block_latency(block, r, hw, plan).total)
            for label, plan in ablation_plans()]


def stage_latency(blocks: Sequence[BlockSpec], rates: Sequence[float], S: int,
                  hw: HardwareSpec) -> float:
    total = 0.0
    for b, r in zip(blocks, rates):
        b = b.with_granularity(S)
        total += predict_block_latency(b, r, hw, decide_fusion(b, None, r, hw)).total
    return total


def choose_granularity(net: NetworkSpec, hw: HardwareSpec, rates: Sequence[float]) -> tuple[int, ...]:
    """Per stage, the smallest S whose latency is within 2% of the stage's best."""
    rates = list(rates)
    if len(rates) != net.num_blocks:
        raise DomainError(f"{len(rates)} rates for {net.num_blocks} blocks")
    chosen, pos = [], 0
    n_stages = len(net.stages)
    for i, blocks in net.iter_stage_blocks():
        stage_rates = rates[pos:pos + len(blocks)]
        pos += len(blocks)
        cands = block_granularities(blocks[0])
        if i == n_stages - 1 or not cands:
            chosen.append(1)
            continue
        lats = [stage_latency(blocks, stage_rates, s, hw) for s in cands]
        best = min(lats)
        chosen.append(next(s for s, l in zip(cands, lats)
                           if l <= best * (1 + GRANULARITY_TOLERANCE)))
    return tuple(chosen)
