"""MAC accounting for static and dynamic blocks and whole networks.

One multiply-accumulate counts as 1; set ``flops_per_mac=2`` on the report
helpers to get the other common convention. Block arithmetic is generic over
the number type of ``r``: pass a :class:`fractions.Fraction` for exact counts.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Real
from typing import Sequence

from .errors import DomainError
from .model import BlockSpec, ConvLayerSpec, NetworkSpec
from .ops import FusionPlan

FLOPS_PER_MAC = 1


@dataclass(frozen=True)
class FlopsReport:
    per_layer: tuple[tuple[str, Real], ...]
    f_dyn: Real
    f_stat: Real
    total_macs: Real = field(init=False)
    ratio: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "per_layer", tuple(self.per_layer))
        object.__setattr__(self, "total_macs", sum(m for _, m in self.per_layer))
        object.__setattr__(self, "ratio", float(self.f_dyn / self.f_stat) if self.f_stat else 0.0)

    def scaled(self, flops_per_mac: int = FLOPS_PER_MAC) -> "FlopsReport":
        return FlopsReport(tuple((n, m * flops_per_mac) for n, m in self.per_layer),
                           self.f_dyn * flops_per_mac, self.f_stat * flops_per_mac)

    def to_dict(self) -> dict:
        return {
            "per_layer": [{"layer": n, "macs": float(m)} for n, m in self.per_layer],
            "total_macs": float(self.total_macs),
            "f_dyn": float(self.f_dyn),
            "f_stat": float(self.f_stat),
            "ratio": self.ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "macs"])
        for n, m in self.per_layer:
            w.writerow([n, repr(float(m))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, f_dyn=None, f_stat=None) -> "FlopsReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        per_layer = tuple((r["layer"], float(r["macs"])) for r in rows)
        total = sum(m for _, m in per_layer)
        return cls(per_layer, total if f_dyn is None else f_dyn, total if f_stat is None else f_stat)


def conv_macs(layer: ConvLayerSpec, out_h: int, out_w: int) -> int:
    return out_h * out_w * layer.c_out * layer.c_in * layer.kernel ** 2 // layer.groups


def halo_factor(block: BlockSpec) -> Fraction:
    """Pixels conv1 must produce per output-patch pixel when computed on gathered patches."""
    return Fraction(block.input_patch_side, block.cell_input_side) ** 2


def _check_rate(r):
    if not 0 <= r <= 1:
        raise DomainError(f"activation rate {r} outside [0, 1]")


def block_static_layers(block: BlockSpec) -> list[tuple[str, int]]:
    hi, wi, ho, wo = block.input_h, block.input_w, block.output_h, block.output_w
    out = [("conv1", conv_macs(block.conv1, hi, wi)),
           ("conv2", conv_macs(block.conv2, ho, wo)),
           ("conv3", conv_macs(block.conv3, ho, wo))]
    if block.se_channels:
        out.append(("se", 2 * block.width * block.se_channels))
    if block.downsample is not None:
        out.append(("downsample", conv_macs(block.downsample, ho, wo)))
    return out


def masker_macs(block: BlockSpec, fused: bool) -> int:
    """Extra MACs the (single-output-channel) masker adds.

    Unfused: average pooling accumulates every input pixel, then a 1x1 conv
    per coarse cell. Fused into conv1: one extra conv1 output channel over
    the full input, then pooling of that one channel.
    """
    hw = block.input_h * block.input_w
    if fused:
        return block.c_in * hw + hw
    return block.c_in * hw + block.c_in * block.cells


def block_dynamic_layers(block: BlockSpec, r, fusion: FusionPlan | None = None,
                         masker: bool = True, halo_cap: bool = True) -> list[tuple[str, Real]]:
    """Per-layer MACs at activation rate ``r``.

    Unfused conv1 also computes the halo conv2 needs around each patch;
    ``halo_cap`` bounds that at the dense count. A masker-fused conv1 is dense.
    """
    _check_rate(r)
    fusion = fusion or FusionPlan()
    dense = dict(block_static_layers(block))
    if fusion.fuse_masker_conv1:
        f1 = 1
    else:
        f1 = r * halo_factor(block)
        if halo_cap:
            f1 = min(1, f1)
    out = []
    if masker:
        out.append(("masker", masker_macs(block, fusion.fuse_masker_conv1)))
    out += [("conv1", dense["conv1"] * f1),
            ("conv2", dense["conv2"] * r),
            ("conv3", dense["conv3"] * r)]
    for name in ("se", "downsample"):
        if name in dense:
            out.append((name, dense[name]))
    return out


def block_dynamic_macs(block: BlockSpec, r, fusion: FusionPlan | None = None,
                       masker: bool = True, halo_cap: bool = True) -> FlopsReport:
    layers = block_dynamic_layers(block, r, fusion, masker, halo_cap)
    f_stat = sum(m for _, m in block_static_layers(block))
    return FlopsReport(tuple(layers), sum(m for _, m in layers), f_stat)


def _stem_head(net: NetworkSpec) -> list[tuple[str, int]]:
    return [(op.name, conv_macs(op.layer, op.out_h, op.out_w) if op.kind == "conv" else 0)
            for op in net.stem_and_head]


def _fusions_for(net: NetworkSpec, fusions) -> list[FusionPlan | None]:
    n = net.num_blocks
    if fusions is None or isinstance(fusions, FusionPlan):
        return [fusions] * n
    fusions = list(fusions)
    if len(fusions) != n:
        raise DomainError(f"{len(fusions)} fusion plans for {n} blocks")
    return fusions


def network_flops(net: NetworkSpec, rates: Sequence, fusions=None,
                  maskers: bool = True) -> FlopsReport:
    """Dynamic and static MACs of a whole network.

    ``fusions`` is one plan for every block, a per-block list, or ``None``
    (unfused: conv1 computed only where needed).
    """
    rates = list(rates)
    blocks = net.blocks()
    if len(rates) != len(blocks):
        raise DomainError(f"{len(rates)} rates for {len(blocks)} blocks")
    plans = _fusions_for(net, fusions)
    per_layer: list[tuple[str, Real]] = []
    f_stat = 0
    for bid, block, r, plan in zip(net.block_ids(), blocks, rates, plans):
        for name, m in block_dynamic_layers(block, r, plan, maskers):
            per_layer.append((f"{bid}.{name}", m))
        f_stat += sum(m for _, m in block_static_layers(block))
    stem_head = _stem_head(net)
    per_layer += stem_head
    f_stat += sum(m for _, m in stem_head)
    return FlopsReport(tuple(per_layer), sum(m for _, m in per_layer), f_stat)


def static_network_macs(net: NetworkSpec) -> int:
    return network_flops(net, [1] * net.num_blocks, maskers=False).f_stat


def flops_loss(f_dyn: float, f_stat: float, t: float) -> float:
    if f_stat <= 0:
        raise DomainError("static FLOPs must be positive")
    return (f_dyn / f_stat - t) ** 2


def solve_uniform_rate(net: NetworkSpec, t: float, fusions=None, tol: float = 1e-6) -> float:
    """Uniform activation rate whose network FLOPs ratio equals ``t``.

    The ratio is continuous and non-decreasing in r, so plain bisection
    applies; achievability is checked against both endpoints first. Maskers
    add work, so the reachable range can extend slightly above 1.
    """
    if not t > 0:
        raise DomainError(f"target ratio {t} must be positive")
    n = net.num_blocks

    def ratio(r: float) -> float:
        return network_flops(net, [r] * n, fusions).ratio

    lo_ratio, hi_ratio = ratio(0.0), ratio(1.0)
    if abs(hi_ratio - t) < tol:
        return 1.0
    if abs(lo_ratio - t) < tol:
        return 0.0
    if not lo_ratio <= t <= hi_ratio:
        raise DomainError(
            f"target {t} unachievable: ratio spans [{lo_ratio:.6f}, {hi_ratio:.6f}]")
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = ratio(mid)
        if abs(m - t) < tol:
            return mid
        if m < t:
            lo = mid
        else:
            hi = mid
        if hi - lo < math.ulp(1.0):
            break
    return 0.5 * (lo + hi)
