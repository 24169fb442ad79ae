"""Analytical latency model for dynamic and static blocks.

Every op's output space ``(patches, channels, rows, cols)`` is cut into tiles
whose sides are powers of two; tiles are spread over the processing engines
(PEs). For each candidate tile the model sums five terms:

* off2on   -- unique input, weight bytes brought from off-chip memory
* g2l      -- bytes each tile pulls from global on-chip into PE-local memory
              (halo windows and weights re-fetched per tile)
* compute  -- rounds of PE work times the MACs of one tile
* l2g      -- tile outputs written back to global on-chip memory
* on2off   -- unique output bytes written off-chip

On-chip transfers are derated by a transaction-efficiency factor that
depends on the contiguous run length a tile touches. The cheapest tile wins,
ties going to the first candidate in enumeration order.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, astuple, dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .model import BlockSpec, ConvLayerSpec, HardwareSpec
from .ops import (COMPACT, DENSE, INDEXED, Access, FusionPlan, Op, SkipTracker, _conv_access,
                  _conv_op, rewrite_block, static_block_ops)

BYTES_PER_ELEMENT = 4

TERMS = ("off2on", "global2local", "compute", "local2global", "on2off")


@dataclass(frozen=True, order=True)
class TileShape:
    t_p: int
    t_c: int
    t_s1: int
    t_s2: int

    def __post_init__(self):
        for v in (self.t_p, self.t_c, self.t_s1, self.t_s2):
            if v < 1 or v & (v - 1):
                raise DomainError(f"tile side {v} is not a positive power of two")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.t_p, self.t_c, self.t_s1, self.t_s2

    def __str__(self):
        return "x".join(map(str, self.as_tuple()))

    @classmethod
    def parse(cls, text: str) -> "TileShape":
        return cls(*(int(v) for v in text.split("x")))


@dataclass(frozen=True)
class GatheredShape:
    p: int
    c_out: int
    s: int

    def __post_init__(self):
        if self.p < 0 or self.c_out < 1 or self.s < 1:
            raise DomainError(f"invalid gathered shape {self}")


@dataclass(frozen=True)
class OpBytes:
    """Byte counts of one op under one tile choice."""

    off2on: int = 0
    global2local: int = 0
    local2global: int = 0
    on2off: int = 0

    def __add__(self, other: "OpBytes") -> "OpBytes":
        return OpBytes(*(a + b for a, b in zip(astuple(self), astuple(other))))


@dataclass(frozen=True)
class LatencyBreakdown:
    off2on: float = 0.0
    global2local: float = 0.0
    compute: float = 0.0
    local2global: float = 0.0
    on2off: float = 0.0
    chosen_tile: TileShape | None = None
    op: str = ""
    bytes: OpBytes = field(default_factory=OpBytes)
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.off2on + self.global2local + self.compute
                           + self.local2global + self.on2off)

    def to_dict(self) -> dict:
        d = {t: getattr(self, t) for t in TERMS}
        d.update(total=self.total, op=self.op,
                 chosen_tile=None if self.chosen_tile is None else list(self.chosen_tile.as_tuple()),
                 bytes=asdict(self.bytes))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyBreakdown":
        tile = d.get("chosen_tile")
        return cls(*(d[t] for t in TERMS), chosen_tile=None if tile is None else TileShape(*tile),
                   op=d.get("op", ""), bytes=OpBytes(**d.get("bytes", {})))


CSV_COLUMNS = ("op", "tile", "off2on", "g2l", "compute", "l2g", "on2off", "total")


def breakdowns_to_csv(rows: list[LatencyBreakdown], unit: str = "s") -> str:
    """CSV of per-op terms.

    ``unit="s"`` writes exact float reprs. ``unit="us"`` writes microseconds
    with 3 decimals and a total equal to the sum of the rounded terms, so a
    parse/emit cycle reproduces the text exactly.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for b in rows:
        tile = "" if b.chosen_tile is None else str(b.chosen_tile)
        if unit == "s":
            vals = [repr(getattr(b, t)) for t in TERMS] + [repr(b.total)]
        elif unit == "us":
            us = [round(getattr(b, t) * 1e6, 3) for t in TERMS]
            vals = [f"{v:.3f}" for v in us] + [f"{sum(us):.3f}"]
        else:
            raise ValueError(f"unit must be 's' or 'us', got {unit!r}")
        w.writerow([b.op, tile, *vals])
    return buf.getvalue()


def breakdowns_from_csv(text: str, unit: str = "s") -> list[LatencyBreakdown]:
    scale = {"s": 1.0, "us": 1e-6}[unit]
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        tile = TileShape.parse(r["tile"]) if r["tile"] else None
        out.append(LatencyBreakdown(*(float(r[c]) * scale for c in CSV_COLUMNS[2:7]),
                                    chosen_tile=tile, op=r["op"]))
    return out


class BlockLatency(NamedTuple):
    total: float
    per_op: list[LatencyBreakdown]


def patch_count(block: BlockSpec, r: float) -> int:
    if not 0 <= r <= 1:
        raise DomainError(f"activation rate {r} outside [0, 1]")
    return int(math.floor(r * block.cells + 0.5))


def infer_gathered_shape(block: BlockSpec, r: float) -> GatheredShape:
    return GatheredShape(patch_count(block, r), block.c_out, block.granularity)


def pow2_candidates(n: int) -> list[int]:
    """Powers of two up to ``n`` rounded up to the next power of two."""
    out, v = [], 1
    while True:
        out.append(v)
        if v >= n:
            return out
        v *= 2


def _tile_grid(dims: tuple[int, int, int, int]) -> np.ndarray:
    axes = [pow2_candidates(d) for d in dims]
    return np.array(list(itertools.product(*axes)), dtype=np.int64).reshape(-1, 4)


def enumerate_tiles(out: GatheredShape) -> list[TileShape]:
    if out.p == 0:
        return []
    return [TileShape(*map(int, t)) for t in _tile_grid((out.p, out.c_out, out.s, out.s))]


def memory_efficiency(contig_run_bytes, hw: HardwareSpec):
    run = np.asarray(contig_run_bytes, dtype=np.float64)
    if (run < 1).any():
        raise DomainError("contiguous run must be at least one byte")
    eff = run / (np.ceil(run / hw.txn_bytes) * hw.txn_bytes)
    return float(eff) if eff.ndim == 0 else eff


class TileTraffic(NamedTuple):
    in_bytes_per_tile: int
    weight_bytes_per_tile: int
    out_bytes_per_tile: int
    duplication_factor: Fraction


def tile_traffic(op_kind: str, layer: ConvLayerSpec, tile: TileShape, S: int) -> TileTraffic:
    """Per-tile bytes of a conv-like op whose output patches have side ``S``.

    Spatial tile sides are clipped to the patch side. The duplication factor
    is the input pixels a tile fetches per output-footprint input pixel.
    """
    conv = op_kind.endswith("conv")
    k, s = (layer.kernel, layer.stride) if conv else (1, 1)
    a, b = min(tile.t_s1, S), min(tile.t_s2, S)
    wa, wb = (a - 1) * s + k, (b - 1) * s + k
    if conv:
        groups_touched = -(-tile.t_c // layer.cout_per_group)
        cin = min(groups_touched * layer.cin_per_group, layer.c_in)
        weights = tile.t_c * layer.cin_per_group * k * k
    else:
        cin, weights = min(tile.t_c, layer.c_in), 0
    e = BYTES_PER_ELEMENT
    return TileTraffic(tile.t_p * cin * wa * wb * e, weights * e, tile.t_p * tile.t_c * a * b * e,
                       Fraction(wa * wb, (s * a) * (s * b)))


# -- core evaluation -----------------------------------------------------------

@lru_cache(maxsize=None)
def _chan_sum(channels: int, c_out: int, tc: int, group_out: int, group_in: int) -> int:
    acc = Access("", channels, 1, 1, group_out=group_out, group_in=group_in)
    return sum(acc.channels_needed(c0, min(c0 + tc, c_out)) for c0 in range(0, c_out, tc))


def _chan_sums(acc: Access, c_out: int, tcs: np.ndarray) -> np.ndarray:
    lut = {int(t): _chan_sum(acc.channels, c_out, int(t), acc.group_out, acc.group_in)
           for t in np.unique(tcs)}
    return np.array([lut[int(t)] for t in tcs], dtype=np.int64)


def run_elements(acc: Access, patch_side: int) -> int:
    """Contiguous elements per transfer for one access.

    Dense maps move whole feature rows; anything addressed per patch moves
    one patch row of the op's output patch side.
    """
    if acc.layout == DENSE:
        return acc.w
    return patch_side


def tensor_elements(acc: Access, patches: int) -> int:
    """Unique elements of a stored tensor (compact tensors hold P slabs)."""
    return acc.elements(patches)


def output_elements(op: Op, patches: int) -> int:
    return op.unique_output_elements(patches)


def pe_chunk_pairs(n_tiles, per_chunk, n_chunks, num_pe: int):
    """Distinct (PE, channel chunk) pairs when tiles are dealt out in contiguous runs.

    Tiles are ordered channel-chunk-major (``per_chunk`` tiles per chunk) and
    PE ``i`` takes tiles ``[i*g, (i+1)*g)`` with ``g = ceil(n_tiles/num_pe)``.
    Also returns how many PEs touch the last chunk.
    """
    n_tiles, m, n_c = (np.asarray(v, dtype=np.int64) for v in (n_tiles, per_chunk, n_chunks))
    g = -(-n_tiles // num_pe)
    used = -(-n_tiles // g)
    period = g // np.gcd(g, m)
    pairs = used + (n_c - 1) - (n_c - 1) // period
    last = (n_c * m - 1) // g - ((n_c - 1) * m) // g + 1
    return pairs, last


class _Eval(NamedTuple):
    tiles: np.ndarray
    terms: np.ndarray  # (n, 5) seconds
    g2l_bytes: np.ndarray
    l2g_bytes: np.ndarray
    off2on_bytes: int
    on2off_bytes: int


def _evaluate(op: Op, patches: int, hw: HardwareSpec, elem: int) -> _Eval:
    P, C, A, B = op.out_dims(patches)
    tiles = _tile_grid((P, C, A, B))
    tp, tc, ta, tb = tiles.T
    cp, cc, ca, cb = (np.minimum(tiles[:, i], d) for i, d in enumerate((P, C, A, B)))
    n_p, n_c, n_a, n_b = (-(-d // tiles[:, i]) for i, d in enumerate((P, C, A, B)))
    n_tiles = n_p * n_c * n_a * n_b

    bw = min(hw.onchip_global_bandwidth, hw.num_pe * hw.local_bandwidth_per_pe)
    g2l_bytes = np.zeros(len(tiles), dtype=np.int64)
    g2l_time = np.zeros(len(tiles))
    distinct: dict[str, int] = {}
    for acc in op.inputs:
        sum_a = acc.stride * A + n_a * (acc.kernel - acc.stride)
        sum_b = acc.stride * B + n_b * (acc.kernel - acc.stride)
        fetched = P * _chan_sums(acc, C, tc) * sum_a * sum_b * elem
        g2l_bytes += fetched
        g2l_time += fetched / (bw * memory_efficiency(run_elements(acc, B) * elem, hw))
        distinct[acc.tensor] = tensor_elements(acc, patches)
    if op.weight_per_cout:
        # each PE loads the weight slice of every channel chunk it works on, once
        pairs, last_pes = pe_chunk_pairs(n_tiles, n_p * n_a * n_b, n_c, hw.num_pe)
        last_size = C - (n_c - 1) * cc
        w_fetched = (cc * pairs - (cc - last_size) * last_pes) * op.weight_per_cout * elem
        g2l_bytes += w_fetched
        g2l_time += w_fetched / (bw * memory_efficiency(cc * op.weight_per_cout * elem, hw))

    out_acc = op.out
    if op.reduce_channels:
        l2g_bytes = n_c * P * A * B * elem  # every channel chunk writes partial sums
    else:
        l2g_bytes = np.full(len(tiles), P * C * A * B * elem, dtype=np.int64)
    out_run = run_elements(replace(out_acc, kernel=1, stride=1), B) * elem
    l2g_time = l2g_bytes / (bw * memory_efficiency(out_run, hw))

    per_pe = hw.fp32_lanes_per_pe * hw.fma_per_lane_per_cycle * hw.frequency
    compute = -(-n_tiles // hw.num_pe) * (cp * cc * ca * cb * op.red) / per_pe

    off2on_bytes = (sum(distinct.values()) + op.weight_elements) * elem
    on2off_bytes = output_elements(op, patches) * elem
    terms = np.stack([
        np.full(len(tiles), off2on_bytes / hw.offchip_bandwidth),
        g2l_time,
        compute,
        l2g_time,
        np.full(len(tiles), on2off_bytes / hw.offchip_bandwidth),
    ], axis=1)
    return _Eval(tiles, terms, g2l_bytes, l2g_bytes, off2on_bytes, on2off_bytes)


@lru_cache(maxsize=65536)
def _op_latency_cached(op: Op, patches: int, hw: HardwareSpec, elem: int) -> LatencyBreakdown:
    ev = _evaluate(op, patches, hw, elem)
    totals = ev.terms.sum(axis=1)
    i = int(np.argmin(totals))  # first minimum = first in enumeration order
    b = OpBytes(ev.off2on_bytes, int(ev.g2l_bytes[i]), int(ev.l2g_bytes[i]), ev.on2off_bytes)
    return LatencyBreakdown(*(float(v) for v in ev.terms[i]),
                            chosen_tile=TileShape(*map(int, ev.tiles[i])), op=op.name, bytes=b)


def op_latency(op: Op, patches: int, hw: HardwareSpec) -> LatencyBreakdown:
    """Best-tile latency of one op with ``patches`` selected patches."""
    return _op_latency_cached(op, patches, hw, BYTES_PER_ELEMENT)


def op_latency_all_tiles(op: Op, patches: int, hw: HardwareSpec) -> tuple[list[TileShape], np.ndarray]:
    """Total latency of every candidate tile, in enumeration order (for audits)."""
    ev = _evaluate(op, patches, hw, BYTES_PER_ELEMENT)
    return [TileShape(*map(int, t)) for t in ev.tiles], ev.terms.sum(axis=1)


def op_term_table(op: Op, patches: int, hw: HardwareSpec) -> tuple[np.ndarray, np.ndarray]:
    """Candidate tiles ``(n, 4)`` and their five latency terms ``(n, 5)``, in seconds."""
    ev = _evaluate(op, patches, hw, BYTES_PER_ELEMENT)
    return ev.tiles.copy(), ev.terms.copy()


def op_bytes(op: Op, patches: int, tile: TileShape, hw: HardwareSpec) -> OpBytes:
    """Byte terms of ``op`` under one specific tile."""
    ev = _evaluate(op, patches, hw, BYTES_PER_ELEMENT)
    idx = np.flatnonzero((ev.tiles == np.array(tile.as_tuple())).all(axis=1))
    if not len(idx):
        raise DomainError(f"tile {tile} is not a candidate for op {op.name}")
    i = int(idx[0])
    return OpBytes(ev.off2on_bytes, int(ev.g2l_bytes[i]), int(ev.l2g_bytes[i]), ev.on2off_bytes)


def clear_caches() -> None:
    _op_latency_cached.cache_clear()
    _block_latency_cached.cache_clear()


# -- single-op convenience -----------------------------------------------------

def predict_op_latency(op_kind: str, layer: ConvLayerSpec, shape: GatheredShape, S: int,
                       hw: HardwareSpec, *, map_side: int | None = None) -> LatencyBreakdown:
    """Latency of a standalone op producing ``shape``.

    ``dyn_conv`` reads compact gathered patches (with halo); ``static_conv``
    and ``elementwise`` treat ``shape.s`` as the side of a dense output map.
    ``gather``, ``scatter_add`` and ``masker`` need the dense map side
    ``map_side``.
    """
    if shape.p == 0:
        return LatencyBreakdown(op=op_kind)
    k, s = layer.kernel, layer.stride
    cin = layer.c_in
    if op_kind == "dyn_conv":
        side = (shape.s - 1) * s + k
        op = _conv_op(op_kind, op_kind, layer, _conv_access("in", layer, side, side, COMPACT),
                      Access("out", shape.c_out, shape.s, shape.s, COMPACT), False, True)
        return op_latency(op, shape.p, hw)
    if op_kind == "static_conv":
        side = shape.s * s
        op = _conv_op(op_kind, op_kind, layer,
                      _conv_access("in", layer, side, side, DENSE, halo=layer.padding),
                      Access("out", shape.c_out, shape.s, shape.s), False, False)
        return op_latency(op, 1, hw)
    if op_kind == "elementwise":
        a = Access("in", shape.c_out, shape.s, shape.s)
        return op_latency(Op(op_kind, op_kind, Access("out", shape.c_out, shape.s, shape.s), (a,),
                             red=1), 1, hw)
    if map_side is None:
        raise DomainError(f"{op_kind} needs the dense map side")
    if op_kind == "gather":
        side = (S - 1) * s + k
        src = Access("in", cin, map_side, map_side, INDEXED, halo=layer.padding, cell=S * s,
                     patch=side)
        op = Op(op_kind, op_kind, Access("out", cin, side, side, COMPACT), (src,), dynamic=True)
        return op_latency(op, shape.p, hw)
    if op_kind == "scatter_add":
        tgt = Access("res", shape.c_out, map_side, map_side, INDEXED, cell=S, patch=S)
        op = Op(op_kind, op_kind, tgt, (Access("c", shape.c_out, S, S, COMPACT), tgt),
                dynamic=True, red=1)
        return op_latency(op, shape.p, hw)
    if op_kind == "masker":
        cell = map_side // shape.s
        op = Op(op_kind, op_kind, Access("mask", 1, shape.s, shape.s),
                (Access("x", cin, map_side, map_side, kernel=cell, stride=cell, group_in=cin),),
                red=cin * cell * cell + cin, weight_per_cout=cin)
        return op_latency(op, 1, hw)
    raise DomainError(f"unknown op kind {op_kind!r}")


# -- blocks --------------------------------------------------------------------

def block_ops(block: BlockSpec, patches: int, fusion: FusionPlan | None = None, *,
              static: bool = False, halo_cap: bool = False, masker: bool = True) -> list[Op]:
    """Ops actually executed for ``patches`` selected patches (dynamic ops dropped at 0)."""
    ops = rewrite_block(block, fusion, patches=patches, static=static, halo_cap=halo_cap,
                        masker=masker)
    tracker = SkipTracker(1 if static else patches)
    return [o for o in (tracker.resolve(op) for op in ops) if o is not None]


@lru_cache(maxsize=16384)
def _block_latency_cached(block: BlockSpec, patches: int, hw: HardwareSpec,
                          fusion: FusionPlan | None, static: bool, halo_cap: bool,
                          masker: bool, elem: int) -> BlockLatency:
    per_op = [_op_latency_cached(op, patches, hw, elem)
              for op in block_ops(block, patches, fusion, static=static, halo_cap=halo_cap,
                                  masker=masker)]
    return BlockLatency(sum(b.total for b in per_op), per_op)


def _mix(lo: LatencyBreakdown, hi: LatencyBreakdown, f: float) -> LatencyBreakdown:
    terms = [(1 - f) * getattr(lo, t) + f * getattr(hi, t) for t in TERMS]
    near = hi if f >= 0.5 else lo
    return LatencyBreakdown(*terms, chosen_tile=near.chosen_tile, op=near.op, bytes=near.bytes)


def _mix_ops(lo: list[LatencyBreakdown], hi: list[LatencyBreakdown], f: float) -> list[LatencyBreakdown]:
    """Blend two op lists that may differ by ops skipped at zero patches."""
    if len(lo) == len(hi):
        return [_mix(a, b, f) for a, b in zip(lo, hi)]
    by_name = {b.op: b for b in lo}
    return [_mix(by_name.get(b.op, LatencyBreakdown(op=b.op)), b, f) for b in hi]


def predict_block_latency(block: BlockSpec, r: float, hw: HardwareSpec,
                          fusion: FusionPlan | None = None, *, patches: int | None = None,
                          static: bool = False, halo_cap: bool = False,
                          masker: bool = True) -> BlockLatency:
    """Latency of a block at activation rate ``r`` (or an exact patch count).

    For a rate, the expected patch count ``r * cells`` is generally
    fractional; the latency is interpolated linearly between the two
    neighbouring whole counts, i.e. the mean over masks holding one or the
    other in the right proportion.
    """
    if fusion is not None and fusion.r_th is not None:
        fusion = FusionPlan(fusion.fuse_masker_conv1, fusion.fuse_gather_conv,
                            fusion.fuse_scatter_add)

    def at(p: int) -> BlockLatency:
        return _block_latency_cached(block, p, hw, fusion, static, halo_cap, masker,
                                     BYTES_PER_ELEMENT)

    if patches is not None or static:
        res = at(1 if patches is None else patches)
        return BlockLatency(res.total, list(res.per_op))
    if not 0 <= r <= 1:
        raise DomainError(f"activation rate {r} outside [0, 1]")
    expected = r * block.cells
    lo = int(math.floor(expected))
    f = expected - lo
    a = at(lo)
    if f == 0:
        return BlockLatency(a.total, list(a.per_op))
    b = at(lo + 1)
    ops = _mix_ops(a.per_op, b.per_op, f)
    return BlockLatency(sum(o.total for o in ops), ops)


def static_block_latency(block: BlockSpec, hw: HardwareSpec) -> float:
    return predict_block_latency(block, 1.0, hw, static=True).total


__all__ = [
    "BYTES_PER_ELEMENT", "TileShape", "GatheredShape", "LatencyBreakdown", "OpBytes",
    "BlockLatency", "TileTraffic", "infer_gathered_shape", "enumerate_tiles",
    "memory_efficiency", "tile_traffic", "predict_op_latency", "op_latency", "op_bytes",
    "predict_block_latency", "static_block_latency", "patch_count", "pow2_candidates",
    "block_ops", "static_block_ops", "breakdowns_to_csv", "breakdowns_from_csv",
]
