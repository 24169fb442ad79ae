"""Desk-scale functional executor for dynamic blocks, with a byte-level traffic trace.

The executor runs the same operator list the cost model prices, tile by
tile, on real arrays. It counts bytes from the slices it actually moves and
MACs from the contractions it actually performs, so it can serve as an
independent oracle for the model's byte terms and for the FLOPs counter.

Values are computed in float64; traffic is counted at 4 bytes per element.
Convolutions have no bias, so zero padding and the zeros a gathered conv1
produces outside the image agree.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .flops import block_dynamic_macs
from .latcost import TileShape, block_ops, op_bytes, op_latency, pow2_candidates
from .mask import CoarseMask, patch_indices, synth_mask
from .model import BlockSpec, ConvLayerSpec, HardwareSpec
from .ops import COMPACT, DENSE, INDEXED, Access, FusionPlan, Op

ELEMENT_BYTES = 4


@dataclass
class Tensor:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"tensor must be (channels, height, width), got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def save(self, path) -> None:
        header = json.dumps({"shape": list(self.shape), "dtype": "<f4"}).encode()
        with open(path, "wb") as fh:
            fh.write(header + b"\n")
            fh.write(self.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Tensor":
        raw = Path(path).read_bytes()
        head, _, body = raw.partition(b"\n")
        meta = json.loads(head)
        data = np.frombuffer(body, dtype=meta["dtype"])
        if data.size != int(np.prod(meta["shape"])):
            raise ShapeError(f"payload holds {data.size} elements, header says {meta['shape']}")
        return cls(data.reshape(meta["shape"]))


@dataclass
class OpTrace:
    off2on_bytes: int = 0
    global2local_bytes: int = 0
    local2global_bytes: int = 0
    on2off_bytes: int = 0
    mac_count: int = 0


@dataclass
class TrafficTrace:
    off2on_bytes: int = 0
    global2local_bytes: int = 0
    local2global_bytes: int = 0
    on2off_bytes: int = 0
    mac_count: int = 0
    per_op: dict[str, OpTrace] = field(default_factory=dict)

    def add(self, name: str, t: OpTrace) -> None:
        self.per_op[name] = t
        self.off2on_bytes += t.off2on_bytes
        self.global2local_bytes += t.global2local_bytes
        self.local2global_bytes += t.local2global_bytes
        self.on2off_bytes += t.on2off_bytes
        self.mac_count += t.mac_count


@dataclass
class BlockWeights:
    """Conv weights of one block, ``(c_out, c_in / groups, k, k)``; masker is ``(2, c_in)``."""

    conv1: np.ndarray
    conv2: np.ndarray
    conv3: np.ndarray
    masker: np.ndarray
    downsample: np.ndarray | None = None

    @classmethod
    def random(cls, block: BlockSpec, seed: int | np.random.Generator = 0) -> "BlockWeights":
        rng = np.random.default_rng(seed)

        def w(layer: ConvLayerSpec) -> np.ndarray:
            fan_in = layer.cin_per_group * layer.kernel ** 2
            shape = (layer.c_out, layer.cin_per_group, layer.kernel, layer.kernel)
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        c1, c2, c3 = block.layers
        return cls(w(c1), w(c2), w(c3), rng.standard_normal((2, block.c_in)),
                   None if block.downsample is None else w(block.downsample))


def _check_weights(w: np.ndarray, layer: ConvLayerSpec) -> None:
    want = (layer.c_out, layer.cin_per_group, layer.kernel, layer.kernel)
    if w.shape != want:
        raise ShapeError(f"weights {w.shape} do not match layer {want}")


def dense_conv(x: Tensor, weights: np.ndarray, layer: ConvLayerSpec) -> Tensor:
    """Direct convolution with zero padding ``k // 2``; loops over groups and taps."""
    c, h, w = x.shape
    if c != layer.c_in:
        raise ShapeError(f"input has {c} channels, layer expects {layer.c_in}")
    weights = np.asarray(weights, dtype=np.float64)
    _check_weights(weights, layer)
    k, s, pad = layer.kernel, layer.stride, layer.padding
    ho, wo = layer.out_size(h), layer.out_size(w)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((layer.c_out, ho, wo))
    gi, go = layer.cin_per_group, layer.cout_per_group
    for g in range(layer.groups):
        xs = xp[g * gi:(g + 1) * gi]
        wg = weights[g * go:(g + 1) * go]
        for dy in range(k):
            for dx in range(k):
                win = xs[:, dy:dy + (ho - 1) * s + 1:s, dx:dx + (wo - 1) * s + 1:s]
                out[g * go:(g + 1) * go] += np.einsum("chw,oc->ohw", win, wg[:, :, dy, dx])
    return Tensor(out)


def _relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def dense_block_forward(x: Tensor, weights: BlockWeights, block: BlockSpec) -> Tensor:
    """Static reference: relu(conv1), relu(conv2), conv3, plus the residual."""
    if block.se_channels:
        raise NotImplementedError("SE blocks are priced by the cost model but not executed")
    c1, c2, c3 = block.layers
    y = Tensor(_relu(dense_conv(x, weights.conv1, c1).data))
    y = Tensor(_relu(dense_conv(y, weights.conv2, c2).data))
    y = dense_conv(y, weights.conv3, c3).data
    if block.downsample is not None:
        res = dense_conv(x, weights.downsample, block.downsample).data
    else:
        res = x.data
    return Tensor(y + res if block.has_residual else y)


def masker_reduce_weights(w2: np.ndarray) -> np.ndarray:
    """Collapse a 2-output 1x1 masker to one output: positive means channel 0 wins."""
    w2 = np.asarray(w2, dtype=np.float64)
    if w2.ndim == 4:
        if w2.shape[2:] != (1, 1):
            raise ShapeError("masker weights must be 1x1")
        w2 = w2[:, :, 0, 0]
    if w2.ndim != 2 or w2.shape[0] != 2:
        raise ShapeError(f"masker weights must have 2 output channels, got {w2.shape}")
    return w2[0] - w2[1]


def masker_decision(x: Tensor, w2: np.ndarray, cell: int) -> np.ndarray:
    """Coarse decision grid from average pooling and the reduced masker (ties not selected)."""
    c, h, w = x.shape
    pooled = x.data.reshape(c, h // cell, cell, w // cell, cell).mean(axis=(2, 4))
    logit = np.einsum("c,chw->hw", masker_reduce_weights(w2), pooled)
    return (logit > 0).astype(np.uint8)


# -- tiled op interpreter -------------------------------------------------------

def _full_tile(dims) -> TileShape:
    return TileShape(*(pow2_candidates(d)[-1] for d in dims))


class _Store:
    """Named tensors plus the padded copies indexed reads use."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self._padded: dict[tuple[str, int, int, int], np.ndarray] = {}

    def view(self, acc: Access) -> np.ndarray:
        a = self.arrays[acc.tensor]
        if acc.layout == COMPACT:
            return a[:, :acc.channels]
        return a[:acc.channels]

    def padded(self, acc: Access) -> np.ndarray:
        key = (acc.tensor, acc.channels, acc.halo, acc.kernel)
        if key not in self._padded:
            lo, hi = acc.halo, acc.halo + acc.kernel
            self._padded[key] = np.pad(self.view(acc), ((0, 0), (lo, hi), (lo, hi)))
        return self._padded[key]

    def set(self, name: str, arr: np.ndarray) -> None:
        self.arrays[name] = arr
        for key in [k for k in self._padded if k[0] == name]:
            del self._padded[key]


def _chan_range(acc: Access, c0: int, c1: int) -> tuple[int, int]:
    lo = (c0 // acc.group_out) * acc.group_in
    hi = ((c1 - 1) // acc.group_out + 1) * acc.group_in
    return lo, min(hi, acc.channels)


def _fetch(store: _Store, acc: Access, idx: np.ndarray, p0: int, p1: int, c0: int, c1: int,
           a0: int, a1: int, b0: int, b1: int) -> tuple[np.ndarray, int]:
    """Input window a tile reads, shaped ``(patches, channels, rows, cols)``."""
    lo, hi = _chan_range(acc, c0, c1)
    s, k = acc.stride, acc.kernel
    wa, wb = (a1 - a0 - 1) * s + k, (b1 - b0 - 1) * s + k
    if acc.layout == COMPACT:
        win = store.view(acc)[p0:p1, lo:hi, a0 * s:a0 * s + wa, b0 * s:b0 * s + wb]
    elif acc.layout == DENSE:
        src = store.padded(acc)
        win = src[None, lo:hi, a0 * s:a0 * s + wa, b0 * s:b0 * s + wb]
    else:
        src = store.padded(acc)
        rows = [src[lo:hi, i * acc.cell + a0 * s:i * acc.cell + a0 * s + wa,
                    j * acc.cell + b0 * s:j * acc.cell + b0 * s + wb] for i, j in idx[p0:p1]]
        win = np.stack(rows) if rows else np.zeros((0, hi - lo, wa, wb))
    return win, lo


def _conv_tile(win: np.ndarray, lo: int, w: np.ndarray, acc: Access, c0: int, c1: int,
               ta: int, tb: int) -> tuple[np.ndarray, int]:
    s, k = acc.stride, acc.kernel
    out = np.zeros((win.shape[0], c1 - c0, ta, tb))
    macs = 0
    go, gi = acc.group_out, acc.group_in
    for g in range(c0 // go, (c1 - 1) // go + 1):
        o0, o1 = max(c0, g * go), min(c1, (g + 1) * go)
        xs = win[:, g * gi - lo:(g + 1) * gi - lo]
        for dy in range(k):
            for dx in range(k):
                tap = xs[:, :, dy:dy + (ta - 1) * s + 1:s, dx:dx + (tb - 1) * s + 1:s]
                out[:, o0 - c0:o1 - c0] += np.einsum("pcab,oc->poab", tap, w[o0:o1, :, dy, dx])
                macs += tap.shape[0] * (o1 - o0) * xs.shape[1] * ta * tb
    return out, macs


def _run_op(op: Op, store: _Store, weights: np.ndarray | None, idx: np.ndarray, tile: TileShape,
            num_pe: int) -> OpTrace:
    P = len(idx)
    Pd, C, A, B = op.out_dims(P)
    out = op.out
    tr = OpTrace()
    e = ELEMENT_BYTES

    # output buffer
    if op.reduce_channels:
        dest = np.zeros((1, out.h, out.w))
    elif out.layout == COMPACT:
        dest = np.zeros((P, C, out.h, out.w))
    elif out.layout == INDEXED and not out.zero_fill:
        dest = store.arrays[out.tensor].copy()
    else:
        dest = np.zeros((C, out.h, out.w))
    touched = np.zeros(dest.shape, dtype=bool)
    if out.zero_fill:
        touched[:] = True

    tp, tc, ta, tb = tile.as_tuple()
    n_tiles = (-(-Pd // tp)) * (-(-C // tc)) * (-(-A // ta)) * (-(-B // tb))
    per_pe = -(-n_tiles // num_pe)
    loaded: set[tuple[int, int]] = set()
    t = 0
    for ci, c0 in enumerate(range(0, C, tc)):
        c1 = min(c0 + tc, C)
        for p0 in range(0, Pd, tp):
            p1 = min(p0 + tp, Pd)
            for a0 in range(0, A, ta):
                a1 = min(a0 + ta, A)
                for b0 in range(0, B, tb):
                    b1 = min(b0 + tb, B)
                    pe = t // per_pe
                    t += 1
                    if op.weight_per_cout and (pe, ci) not in loaded:
                        loaded.add((pe, ci))
                        tr.global2local_bytes += (c1 - c0) * op.weight_per_cout * e
                    wins = []
                    for acc in op.inputs:
                        win, lo = _fetch(store, acc, idx, p0, p1, c0, c1, a0, a1, b0, b1)
                        tr.global2local_bytes += win.size * e
                        wins.append((win, lo, acc))
                    res, macs = _compute(op, wins, weights, c0, c1, a1 - a0, b1 - b0)
                    tr.mac_count += macs
                    tr.local2global_bytes += res.size * e
                    _write(op, dest, touched, res, idx, p0, p1, c0, c1, a0, a1, b0, b1)

    if op.kind == "static_conv" and op.channel_split:
        # pooled mask logits fall out of the fused conv's epilogue
        tr.mac_count += out.h * out.w
    if op.relu:
        if op.channel_split:
            dest[:op.channel_split] = _relu(dest[:op.channel_split])
        else:
            dest[:] = _relu(dest)
    store.set(out.tensor, dest)

    seen = {acc.tensor: store.view(acc).size for acc in op.inputs}
    w_size = 0 if weights is None else weights.size
    tr.off2on_bytes = (sum(seen.values()) + w_size) * e
    tr.on2off_bytes = int(touched.sum()) * e
    return tr


def _compute(op: Op, wins, weights, c0: int, c1: int, ta: int, tb: int) -> tuple[np.ndarray, int]:
    kind = op.kind
    if kind in ("dyn_conv", "static_conv"):
        win, lo, acc = wins[0]
        res, macs = _conv_tile(win, lo, weights, acc, c0, c1, ta, tb)
        for extra, _, _ in wins[1:]:  # fused residual epilogue
            res = res + extra
        return res, macs
    if kind == "masker":
        win, _, acc = wins[0]
        cell = acc.kernel
        n, c = win.shape[:2]
        pooled = win.reshape(n, c, ta, cell, tb, cell).mean(axis=(3, 5))
        part = np.einsum("pcab,c->pab", pooled, weights[c0:c1])[:, None]
        return part, n * c * ta * tb * (cell * cell + 1)
    if kind in ("gather", "scatter"):
        return wins[0][0], 0
    if kind in ("scatter_add", "elementwise"):
        if op.name == "se":
            raise NotImplementedError("SE blocks are priced by the cost model but not executed")
        res = wins[0][0]
        for extra, _, _ in wins[1:]:
            res = res + extra
        return res, 0
    raise ValueError(f"unknown op kind {kind!r}")


def _write(op: Op, dest, touched, res, idx, p0, p1, c0, c1, a0, a1, b0, b1) -> None:
    out = op.out
    if op.reduce_channels:
        dest[0, a0:a1, b0:b1] += res[0, 0]
        touched[0, a0:a1, b0:b1] = True
    elif out.layout == COMPACT:
        dest[p0:p1, c0:c1, a0:a1, b0:b1] = res
        touched[p0:p1, c0:c1, a0:a1, b0:b1] = True
    elif out.layout == INDEXED:
        for n, (i, j) in enumerate(idx[p0:p1]):
            r, q = i * out.cell + a0, j * out.cell + b0
            dest[c0:c1, r:r + a1 - a0, q:q + b1 - b0] = res[n]
            touched[c0:c1, r:r + a1 - a0, q:q + b1 - b0] = True
    else:
        dest[c0:c1, a0:a1, b0:b1] = res[0]
        touched[c0:c1, a0:a1, b0:b1] = True


def _op_weights(op: Op, weights: BlockWeights) -> np.ndarray | None:
    if op.name == "masker":
        return masker_reduce_weights(weights.masker)
    if op.name == "masker_conv1":
        red = masker_reduce_weights(weights.masker)
        return np.concatenate([weights.conv1, red[None, :, None, None]])
    if op.name in ("conv1", "conv2", "conv3"):
        return getattr(weights, op.name)
    if op.name == "downsample":
        return weights.downsample
    return None


def _check_mask(block: BlockSpec, coarse: CoarseMask) -> None:
    if coarse.shape != (block.coarse_h, block.coarse_w) or coarse.s != block.granularity:
        raise ShapeError(
            f"mask {coarse.shape} at S={coarse.s} does not match block grid "
            f"{(block.coarse_h, block.coarse_w)} at S={block.granularity}")


def dynamic_block_forward(x: Tensor, weights: BlockWeights, block: BlockSpec, coarse: CoarseMask,
                          fusion: FusionPlan | None = None, trace: TrafficTrace | None = None, *,
                          tiles: dict[str, TileShape] | None = None,
                          hw: HardwareSpec | None = None, halo_cap: bool = False) -> Tensor:
    """Run the dynamic block on selected patches; unselected output is the residual."""
    _check_mask(block, coarse)
    if x.shape != (block.c_in, block.input_h, block.input_w):
        raise ShapeError(f"input {x.shape} does not match block input "
                         f"{(block.c_in, block.input_h, block.input_w)}")
    if block.se_channels:
        raise NotImplementedError("SE blocks are priced by the cost model but not executed")
    if not block.has_residual:
        raise NotImplementedError("dynamic execution needs a residual to fill unselected patches")
    idx = patch_indices(coarse).as_array()
    P = len(idx)
    store = _Store()
    store.set("x", x.data.copy())
    num_pe = hw.num_pe if hw is not None else 1
    trace = trace if trace is not None else TrafficTrace()
    ops = block_ops(block, P, fusion, halo_cap=halo_cap)
    for op in ops:
        tile = (tiles or {}).get(op.name) or _full_tile(op.out_dims(P))
        trace.add(op.name, _run_op(op, store, _op_weights(op, weights), idx, tile, num_pe))
    if fusion is not None and fusion.fuse_scatter_add:
        final = "res" if block.downsample is not None else "x"
    else:
        final = "out"
    return Tensor(store.arrays[final].copy())


# -- model vs trace ------------------------------------------------------------

BYTE_TERMS = ("off2on", "global2local", "local2global", "on2off")


@dataclass
class TrafficRow:
    op: str
    term: str
    model: int
    trace: int

    @property
    def delta(self) -> int:
        return self.model - self.trace


@dataclass
class TrafficReport:
    rows: list[TrafficRow]
    mac_model: int
    mac_trace: int

    @property
    def ok(self) -> bool:
        return all(r.delta == 0 for r in self.rows)

    def mismatches(self) -> list[TrafficRow]:
        return [r for r in self.rows if r.delta]

    def totals(self) -> dict[str, tuple[int, int]]:
        out = {}
        for t in BYTE_TERMS:
            rows = [r for r in self.rows if r.term == t]
            out[t] = (sum(r.model for r in rows), sum(r.trace for r in rows))
        return out


def model_tiles(block: BlockSpec, patches: int, fusion: FusionPlan | None, hw: HardwareSpec,
                halo_cap: bool = False) -> dict[str, TileShape]:
    return {op.name: op_latency(op, patches, hw).chosen_tile
            for op in block_ops(block, patches, fusion, halo_cap=halo_cap)}


def verify_traffic(block: BlockSpec, coarse: CoarseMask, fusion: FusionPlan | None,
                   hw: HardwareSpec, seed: int = 0, halo_cap: bool = False) -> TrafficReport:
    """Execute with the model's chosen tiles and compare byte terms op by op."""
    P = coarse.count
    tiles = model_tiles(block, P, fusion, hw, halo_cap)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((block.c_in, block.input_h, block.input_w)))
    trace = TrafficTrace()
    dynamic_block_forward(x, BlockWeights.random(block, rng), block, coarse, fusion, trace,
                          tiles=tiles, hw=hw, halo_cap=halo_cap)
    rows = []
    for op in block_ops(block, P, fusion, halo_cap=halo_cap):
        mb = op_bytes(op, P, tiles[op.name], hw)
        tb = trace.per_op[op.name]
        for t in BYTE_TERMS:
            rows.append(TrafficRow(op.name, t, getattr(mb, t), getattr(tb, f"{t}_bytes")))
    macs = block_dynamic_macs(block, Fraction(P, block.cells), fusion, halo_cap=halo_cap).f_dyn
    return TrafficReport(rows, int(macs), trace.mac_count)


# -- seeded validation suite ---------------------------------------------------

DEFAULT_SEEDS = (0, 1, 2, 3)
ALL_PLANS = tuple(FusionPlan(a, b, c) for a in (False, True) for b in (False, True)
                  for c in (False, True))


def random_desk_block(rng: np.random.Generator) -> BlockSpec:
    """A random bottleneck block small enough for the loop-nest executor."""
    c_in = int(rng.choice([4, 8, 16]))
    width = int(rng.choice([4, 8]))
    groups = int(rng.choice([1, 2]))
    stride = int(rng.choice([1, 2]))
    side = int(rng.choice([8, 12, 16])) if stride == 2 else int(rng.choice([4, 6, 8]))
    c_out = int(rng.choice([c_in, 16, 32]))
    downsample = None
    if stride != 1 or c_out != c_in:
        downsample = ConvLayerSpec(c_in, c_out, 1, stride)
    out_side = side // stride
    cands = [s for s in range(1, out_side) if out_side % s == 0]
    return BlockSpec(
        layers=(ConvLayerSpec(c_in, width), ConvLayerSpec(width, width, 3, stride, groups),
                ConvLayerSpec(width, c_out)),
        input_h=side, input_w=side, downsample=downsample,
        granularity=int(rng.choice(cands)),
    )


@dataclass(frozen=True)
class ValidationCase:
    block: BlockSpec
    mask: CoarseMask
    fusion: FusionPlan
    halo_cap: bool
    seed: int

    @property
    def label(self) -> str:
        b = self.block
        return (f"seed={self.seed} {b.c_in}->{b.width}->{b.c_out} {b.input_h}x{b.input_w} "
                f"s={b.stride} S={b.granularity} P={self.mask.count} "
                f"plan={self.fusion.label} cap={int(self.halo_cap)}")


def default_validation_suite(seeds=DEFAULT_SEEDS) -> list[ValidationCase]:
    """Per seed: one random block, masks at three rates, every fusion plan."""
    cases = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        block = random_desk_block(rng)
        for j, r in enumerate((0.0, 0.4, 1.0)):
            mask = synth_mask(block.coarse_h, block.coarse_w, r, seed * 10 + j, block.granularity)
            for plan in ALL_PLANS:
                cases.append(ValidationCase(block, mask, plan, bool(rng.integers(2)), seed))
    return cases


def run_validation(hw: HardwareSpec, seeds=DEFAULT_SEEDS) -> list[tuple[ValidationCase, TrafficReport]]:
    return [(c, verify_traffic(c.block, c.mask, c.fusion, hw, seed=c.seed, halo_cap=c.halo_cap))
            for c in default_validation_suite(seeds)]
