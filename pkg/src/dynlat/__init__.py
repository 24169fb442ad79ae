"""Latency prediction for spatially dynamic convolutional networks.

Modules: ``model`` (hardware and network specs), ``mask`` (spatial masks),
``flops`` (MAC counting), ``latcost`` (tile-level latency model), ``sched``
(fusion decisions, sweeps, network totals), ``simexec`` (a functional
executor that traces traffic) and ``cli``.
"""
from .errors import DomainError, InvalidShapeError, NotFoundError, ShapeError
from .estimator import LatencyPredictor
from .flops import block_dynamic_macs, network_flops, solve_uniform_rate
from .latcost import LatencyBreakdown, TileShape, predict_block_latency, static_block_latency
from .mask import CoarseMask, SoftMask, SpatialMask, gumbel_forward, patch_indices, upsample
from .model import (BlockSpec, ConvLayerSpec, HardwareSpec, NetworkSpec, preset_hardware,
                    preset_network)
from .ops import FusionPlan
from .sched import (compute_r_th, decide_fusion, fusion_ablation, network_latency, sweep_r,
                    sweep_s)

__version__ = "0.1.0"

__all__ = [
    "DomainError", "InvalidShapeError", "NotFoundError", "ShapeError", "LatencyPredictor",
    "block_dynamic_macs", "network_flops", "solve_uniform_rate", "LatencyBreakdown", "TileShape",
    "predict_block_latency", "static_block_latency", "CoarseMask", "SoftMask", "SpatialMask",
    "gumbel_forward", "patch_indices", "upsample", "BlockSpec", "ConvLayerSpec", "HardwareSpec",
    "NetworkSpec", "preset_hardware", "preset_network", "FusionPlan", "compute_r_th",
    "decide_fusion", "fusion_ablation", "network_latency", "sweep_r", "sweep_s",
]
