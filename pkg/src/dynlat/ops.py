"""Operator-level description of a (dynamic or static) bottleneck block.

A block is lowered to an ordered list of :class:`Op`. Each op iterates over
an output space ``(patches, channels, rows, cols)`` that is split into tiles;
its :class:`Access` records describe how a tile's inputs are addressed. The
cost model and the reference executor both consume this description, each
doing its own byte and MAC accounting.

Tensor storage kinds:

* dense map   -- ``(C, H, W)``
* compact     -- ``(P, C, h, w)``, one slab per selected patch
* indexed     -- a dense map addressed through the patch index list
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .model import BlockSpec, ConvLayerSpec, StaticOp

OP_KINDS = ("dyn_conv", "static_conv", "gather", "scatter", "scatter_add",
            "masker", "elementwise")

DENSE, COMPACT, INDEXED = "dense", "compact", "indexed"


@dataclass(frozen=True)
class FusionPlan:
    """The three fusion switches, plus the masker threshold they were decided with."""

    fuse_masker_conv1: bool = False
    fuse_gather_conv: bool = False
    fuse_scatter_add: bool = False
    r_th: float | None = None

    @classmethod
    def none(cls) -> "FusionPlan":
        return cls()

    @classmethod
    def all(cls) -> "FusionPlan":
        return cls(True, True, True)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        flags = [n for n, on in (("masker-conv1", self.fuse_masker_conv1),
                                 ("gather-conv", self.fuse_gather_conv),
                                 ("scatter-add", self.fuse_scatter_add)) if on]
        return "+".join(flags) or "none"


@dataclass(frozen=True)
class Access:
    """How an op touches one tensor.

    ``h``/``w`` are the stored spatial extent (map size, or compact patch
    side). For indexed access ``patch`` is the side of one patch window in
    output-space units and ``cell`` the source pixels per coarse cell. A tile
    spanning ``e`` output positions along a side reads ``(e - 1) * stride +
    kernel`` source positions starting ``halo`` before its origin.
    """

    tensor: str
    channels: int
    h: int
    w: int
    layout: str = DENSE
    kernel: int = 1
    stride: int = 1
    halo: int = 0
    cell: int = 0
    patch: int = 0
    group_out: int = 1  # output channels per channel group
    group_in: int = 1  # input channels read per channel group
    zero_fill: bool = False  # output only: whole tensor initialised to zero first

    def channels_needed(self, c0: int, c1: int) -> int:
        """Input channels an output-channel range ``[c0, c1)`` reads."""
        groups = (c1 - 1) // self.group_out - c0 // self.group_out + 1
        return min(groups * self.group_in, self.channels)

    def elements(self, patches: int) -> int:
        n = self.channels * self.h * self.w
        return n * patches if self.layout == COMPACT else n


@dataclass(frozen=True)
class Op:
    name: str
    kind: str
    out: Access
    inputs: tuple[Access, ...]
    dynamic: bool = False  # skipped entirely when no patch is selected
    red: int = 0  # MACs (or lane ops) per output element
    weight_per_cout: int = 0  # weight elements per output channel
    relu: bool = False
    extra_macs: int = 0  # epilogue work not tied to output elements (mask pooling)
    channel_split: int = 0  # fused masker-conv: channels >= split form the mask output
    reduce_channels: bool = False  # iterated channels are summed into a 1-channel output

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")

    def out_dims(self, patches: int) -> tuple[int, int, int, int]:
        o = self.out
        if o.layout == DENSE:
            return 1, o.channels, o.h, o.w
        if o.layout == COMPACT:
            return patches, o.channels, o.h, o.w
        return patches, o.channels, o.patch, o.patch

    @property
    def weight_elements(self) -> int:
        return self.out.channels * self.weight_per_cout

    def unique_output_elements(self, patches: int) -> int:
        """Distinct output elements left in off-chip memory."""
        o = self.out
        if self.reduce_channels:
            return o.h * o.w
        if o.layout == INDEXED and not o.zero_fill:
            return patches * o.channels * o.patch * o.patch
        return o.elements(patches)

    def without_inputs(self, names) -> "Op":
        return replace(self, inputs=tuple(a for a in self.inputs if a.tensor not in names))


def _conv_access(tensor: str, layer: ConvLayerSpec, h: int, w: int, layout: str,
                 halo: int = 0, cell: int = 0) -> Access:
    return Access(tensor, layer.c_in, h, w, layout, kernel=layer.kernel, stride=layer.stride,
                  halo=halo, cell=cell, group_out=layer.cout_per_group,
                  group_in=layer.cin_per_group)


def _conv_op(name: str, kind: str, layer: ConvLayerSpec, src: Access, out: Access,
             relu: bool, dynamic: bool, extra_inputs=()) -> Op:
    return Op(name, kind, out, (src, *extra_inputs), dynamic=dynamic,
              red=layer.cin_per_group * layer.kernel ** 2,
              weight_per_cout=layer.cin_per_group * layer.kernel ** 2, relu=relu)


def conv1_is_dense(block: BlockSpec, patches: int | None) -> bool:
    """Whether an unfused schedule computes conv1 densely.

    Gathered conv1 recomputes the halo around every patch; once that exceeds
    the dense pixel count the dense conv is never worse.
    """
    if patches is None:
        return False
    return patches * block.input_patch_side ** 2 >= block.input_h * block.input_w


def _se_op(block: BlockSpec) -> Op:
    w = block.width
    se = Access("se", w, block.output_h, block.output_w)
    return Op("se", "elementwise", se, (se,), red=1,
              extra_macs=2 * w * block.se_channels)


def static_block_ops(block: BlockSpec) -> list[Op]:
    """Dense schedule of a block without masker (conv3 epilogue adds the residual)."""
    hi, wi, ho, wo = block.input_h, block.input_w, block.output_h, block.output_w
    c1, c2, c3 = block.layers
    x = "x"
    ops = [
        _conv_op("conv1", "static_conv", c1, _conv_access(x, c1, hi, wi, DENSE),
                 Access("c1", c1.c_out, hi, wi), relu=True, dynamic=False),
        _conv_op("conv2", "static_conv", c2,
                 _conv_access("c1", c2, hi, wi, DENSE, halo=c2.padding),
                 Access("c2", c2.c_out, ho, wo), relu=True, dynamic=False),
    ]
    if block.se_channels:
        ops.append(_se_op(block))
    res = x
    if block.downsample is not None:
        d = block.downsample
        ops.append(_conv_op("downsample", "static_conv", d, _conv_access(x, d, hi, wi, DENSE),
                            Access("res", d.c_out, ho, wo), relu=False, dynamic=False))
        res = "res"
    extra = (Access(res, c3.c_out, ho, wo),) if block.has_residual else ()
    ops.append(_conv_op("conv3", "static_conv", c3, _conv_access("c2", c3, ho, wo, DENSE),
                        Access("out", c3.c_out, ho, wo), relu=False, dynamic=False,
                        extra_inputs=extra))
    return ops


def rewrite_block(block: BlockSpec, fusion: FusionPlan | None = None, *,
                  patches: int | None = None, static: bool = False,
                  halo_cap: bool = False, masker: bool = True) -> list[Op]:
    """Lower a block to its operator list under a fusion plan.

    Unfused order is ``[masker, gather, conv1, conv2, conv3, scatter, add]``
    (plus ``se``/``downsample`` where the block has them). With ``halo_cap``
    an unfused schedule computes conv1 densely (gather after it) once the
    ``patches`` selected patches would need more conv1 work than the dense map.
    ``masker=False`` drops the mask computation (mask supplied from outside).
    """
    if static:
        return static_block_ops(block)
    fusion = fusion or FusionPlan()
    hi, wi, ho, wo = block.input_h, block.input_w, block.output_h, block.output_w
    c1, c2, c3 = block.layers
    S, cell, a1, halo = block.granularity, block.cell_input_side, block.input_patch_side, block.halo
    cin, width, cout = block.c_in, block.width, block.c_out
    ops: list[Op] = []

    if fusion.fuse_masker_conv1 and not masker:
        ops.append(_conv_op("conv1", "static_conv", c1, _conv_access("x", c1, hi, wi, DENSE),
                            Access("c1", width, hi, wi), relu=True, dynamic=False))
        dense_c1 = True
    elif fusion.fuse_masker_conv1:
        fused = replace(c1, c_out=width + 1)
        op = _conv_op("masker_conv1", "static_conv", fused, _conv_access("x", fused, hi, wi, DENSE),
                      Access("c1", width + 1, hi, wi), relu=True, dynamic=False)
        ops.append(replace(op, extra_macs=hi * wi, channel_split=width))
        dense_c1 = True
    else:
        if masker:
            # tiled over (input channel, cell); partial dot products summed into the mask
            ops.append(Op("masker", "masker", Access("mask", cin, block.coarse_h, block.coarse_w),
                          (Access("x", cin, hi, wi, DENSE, kernel=cell, stride=cell),),
                          red=cell * cell + 1, weight_per_cout=1, reduce_channels=True))
        dense_c1 = halo_cap and conv1_is_dense(block, patches)
        if dense_c1:
            ops.append(_conv_op("conv1", "static_conv", c1, _conv_access("x", c1, hi, wi, DENSE),
                                Access("c1", width, hi, wi), relu=True, dynamic=False))

    if dense_c1:
        src = Access("c1", width, hi, wi, INDEXED, halo=halo, cell=cell, patch=a1)
        if not fusion.fuse_gather_conv:
            ops.append(Op("gather", "gather", Access("g", width, a1, a1, COMPACT), (src,),
                          dynamic=True))
            c2_src = _conv_access("g", c2, a1, a1, COMPACT)
        else:
            c2_src = _conv_access("c1", c2, hi, wi, INDEXED, halo=halo, cell=cell)
    else:
        src = Access("x", cin, hi, wi, INDEXED, halo=halo, cell=cell, patch=a1)
        if not fusion.fuse_gather_conv:
            ops.append(Op("gather", "gather", Access("g", cin, a1, a1, COMPACT), (src,),
                          dynamic=True))
            c1_src = _conv_access("g", c1, a1, a1, COMPACT)
        else:
            c1_src = _conv_access("x", c1, hi, wi, INDEXED, halo=halo, cell=cell)
        ops.append(_conv_op("conv1", "dyn_conv", c1, c1_src,
                            Access("c1", width, a1, a1, COMPACT), relu=True, dynamic=True))
        c2_src = _conv_access("c1", c2, a1, a1, COMPACT)

    ops.append(_conv_op("conv2", "dyn_conv", c2, c2_src, Access("c2", width, S, S, COMPACT),
                        relu=True, dynamic=True))
    if block.se_channels:
        ops.append(_se_op(block))
    ops.append(_conv_op("conv3", "dyn_conv", c3, _conv_access("c2", c3, S, S, COMPACT),
                        Access("c3", cout, S, S, COMPACT), relu=False, dynamic=True))

    res = "x"
    if block.downsample is not None:
        d = block.downsample
        ops.append(_conv_op("downsample", "static_conv", d, _conv_access("x", d, hi, wi, DENSE),
                            Access("res", cout, ho, wo), relu=False, dynamic=False))
        res = "res"

    compact_out = Access("c3", cout, S, S, COMPACT)
    if fusion.fuse_scatter_add:
        target = Access(res, cout, ho, wo, INDEXED, cell=S, patch=S)
        ops.append(Op("scatter_add", "scatter_add", target, (compact_out, target),
                      dynamic=True, red=1))
    else:
        ops.append(Op("scatter", "scatter", Access("y", cout, ho, wo, INDEXED, cell=S, patch=S,
                                                   zero_fill=True),
                      (compact_out,), dynamic=True))
        ops.append(Op("add", "elementwise", Access("out", cout, ho, wo),
                      (Access(res, cout, ho, wo), Access("y", cout, ho, wo)), red=1))
    return ops


def static_layer_op(layer: StaticOp) -> Op:
    """Dense op for a stem/head layer."""
    l = layer.layer
    if layer.kind == "conv":
        return _conv_op(layer.name, "static_conv", l,
                        _conv_access("in", l, layer.in_h, layer.in_w, DENSE, halo=l.padding),
                        Access("out", l.c_out, layer.out_h, layer.out_w),
                        relu=True, dynamic=False)
    if layer.kind == "pool":
        src = Access("in", l.c_in, layer.in_h, layer.in_w, DENSE, kernel=l.kernel,
                     stride=l.stride, halo=l.padding)
        return Op(layer.name, "elementwise", Access("out", l.c_out, layer.out_h, layer.out_w),
                  (src,), red=l.kernel ** 2)
    if layer.kind == "gpool":
        src = Access("in", l.c_in, layer.in_h, layer.in_w, DENSE, kernel=layer.in_h,
                     stride=layer.in_h)
        return Op(layer.name, "elementwise", Access("out", l.c_out, 1, 1), (src,),
                  red=layer.in_h * layer.in_w)
    raise ValueError(f"unknown static layer kind {layer.kind!r}")


@dataclass
class SkipTracker:
    """Drops ops (and their outputs) that have nothing to do when no patch is selected."""

    patches: int
    skipped: set[str] = field(default_factory=set)

    def resolve(self, op: Op) -> Op | None:
        if op.dynamic and self.patches == 0:
            self.skipped.add(op.out.tensor)
            return None
        if self.skipped:
            return op.without_inputs(self.skipped)
        return op
