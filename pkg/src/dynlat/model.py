"""Hardware targets and bottleneck-network descriptions.

All specs are frozen dataclasses. They round-trip through plain dicts (and so
JSON) with field names kept identical to the attribute names.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterator

from .errors import InvalidShapeError, NotFoundError

# Defaults for properties the four-number device table does not provide.
DEFAULT_TXN_BYTES = 128
ONCHIP_TO_OFFCHIP_RATIO = 10.0
LOCAL_BYTES_PER_LANE_CYCLE = 8


@dataclass(frozen=True)
class HardwareSpec:
    """A device modelled as ``num_pe`` processing engines behind a 3-level memory."""

    name: str
    num_pe: int
    fp32_lanes_per_pe: int
    frequency: float  # Hz
    offchip_bandwidth: float  # bytes/s
    onchip_global_bandwidth: float  # bytes/s
    local_bandwidth_per_pe: float  # bytes/s
    txn_bytes: int = DEFAULT_TXN_BYTES
    fma_per_lane_per_cycle: int = 1

    def __post_init__(self):
        for f in ("num_pe", "fp32_lanes_per_pe", "frequency", "offchip_bandwidth",
                  "onchip_global_bandwidth", "local_bandwidth_per_pe", "txn_bytes",
                  "fma_per_lane_per_cycle"):
            if not getattr(self, f) > 0:
                raise ValueError(f"HardwareSpec.{f} must be strictly positive")
        if self.onchip_global_bandwidth < self.offchip_bandwidth:
            raise ValueError("on-chip global bandwidth must not be below off-chip bandwidth")

    @classmethod
    def from_table(cls, name: str, num_pe: int, fp32_lanes: int, freq_mhz: float,
                   bandwidth_gbs: float, **overrides) -> "HardwareSpec":
        """Build a spec from the four headline device numbers, filling the rest."""
        freq = freq_mhz * 1e6
        off = bandwidth_gbs * 1e9
        kw = dict(
            name=name,
            num_pe=num_pe,
            fp32_lanes_per_pe=fp32_lanes,
            frequency=freq,
            offchip_bandwidth=off,
            onchip_global_bandwidth=ONCHIP_TO_OFFCHIP_RATIO * off,
            local_bandwidth_per_pe=fp32_lanes * LOCAL_BYTES_PER_LANE_CYCLE * freq,
        )
        kw.update(overrides)
        return cls(**kw)

    @property
    def pe_macs_per_second(self) -> float:
        return self.fp32_lanes_per_pe * self.fma_per_lane_per_cycle * self.frequency

    @property
    def peak_macs_per_second(self) -> float:
        return self.num_pe * self.pe_macs_per_second

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareSpec":
        return cls(**d)


_HARDWARE_TABLE = {
    # name: (#PE, #FP32 per PE, MHz, GB/s)
    "v100": ("Nvidia Tesla V100", 80, 64, 1500, 700),
    "gtx1080": ("Nvidia GTX1080", 20, 64, 1700, 320),
    "tx2": ("Nvidia Jetson TX2", 2, 128, 1300, 59.7),
    "nano": ("Nvidia Nano", 1, 128, 921, 25.6),
}


def hardware_names() -> list[str]:
    return list(_HARDWARE_TABLE)


def preset_hardware(name: str) -> HardwareSpec:
    try:
        _, pe, lanes, mhz, bw = _HARDWARE_TABLE[name.lower()]
    except KeyError:
        raise NotFoundError(f"unknown hardware preset {name!r}; "
                            f"choose from {sorted(_HARDWARE_TABLE)}") from None
    return HardwareSpec.from_table(name.lower(), pe, lanes, mhz, bw)


@dataclass(frozen=True)
class ConvLayerSpec:
    c_in: int
    c_out: int
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    has_bn_act_fused: bool = True

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.kernel, self.stride, self.groups) < 1:
            raise InvalidShapeError(f"non-positive conv parameter in {self}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise InvalidShapeError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def cin_per_group(self) -> int:
        return self.c_in // self.groups

    @property
    def cout_per_group(self) -> int:
        return self.c_out // self.groups

    @property
    def weight_count(self) -> int:
        return self.c_out * self.cin_per_group * self.kernel ** 2

    def out_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class BlockSpec:
    """A bottleneck block: 1x1 reduce, kxk (possibly strided/grouped), 1x1 expand.

    The spatial mask lives on the output grid; ``granularity`` is the patch
    side S governed by one mask decision.
    """

    layers: tuple[ConvLayerSpec, ConvLayerSpec, ConvLayerSpec]
    input_h: int
    input_w: int
    has_residual: bool = True
    downsample: ConvLayerSpec | None = None
    se_reduction: float | None = None
    masker_pool: str = "average"
    granularity: int = 1

    def __post_init__(self):
        if len(self.layers) != 3:
            raise InvalidShapeError("a bottleneck block has exactly three conv layers")
        c1, c2, c3 = self.layers
        if c1.kernel != 1 or c1.stride != 1 or c3.kernel != 1 or c3.stride != 1:
            raise InvalidShapeError("conv1 and conv3 must be stride-1 1x1 convolutions")
        if c1.c_out != c2.c_in or c2.c_out != c3.c_in:
            raise InvalidShapeError("layer channel counts do not chain")
        if self.input_h % c2.stride or self.input_w % c2.stride:
            raise InvalidShapeError("input resolution not divisible by conv2 stride")
        if self.masker_pool != "average":
            raise InvalidShapeError("only average-pooling maskers are supported")
        if self.downsample is not None:
            d = self.downsample
            if d.c_in != c1.c_in or d.c_out != c3.c_out or d.stride != c2.stride or d.kernel != 1:
                raise InvalidShapeError("downsample must be a 1x1 conv matching block in/out")
        elif self.has_residual and (c1.c_in != c3.c_out or c2.stride != 1):
            raise InvalidShapeError("identity residual needs equal in/out shape")
        s = self.granularity
        if s < 1 or self.output_h % s or self.output_w % s:
            raise InvalidShapeError(
                f"granularity S={s} must divide the output resolution "
                f"{self.output_h}x{self.output_w}")

    @property
    def conv1(self) -> ConvLayerSpec:
        return self.layers[0]

    @property
    def conv2(self) -> ConvLayerSpec:
        return self.layers[1]

    @property
    def conv3(self) -> ConvLayerSpec:
        return self.layers[2]

    @property
    def stride(self) -> int:
        return self.conv2.stride

    @property
    def c_in(self) -> int:
        return self.conv1.c_in

    @property
    def width(self) -> int:
        return self.conv1.c_out

    @property
    def c_out(self) -> int:
        return self.conv3.c_out

    @property
    def output_h(self) -> int:
        return self.input_h // self.stride

    @property
    def output_w(self) -> int:
        return self.input_w // self.stride

    @property
    def coarse_h(self) -> int:
        return self.output_h // self.granularity

    @property
    def coarse_w(self) -> int:
        return self.output_w // self.granularity

    @property
    def cells(self) -> int:
        return self.coarse_h * self.coarse_w

    @property
    def cell_input_side(self) -> int:
        """Input-resolution pixels covered by one coarse cell along a side."""
        return self.stride * self.granularity

    @property
    def input_patch_side(self) -> int:
        """Side of the conv1-output window one output patch needs (patch plus halo)."""
        k, s = self.conv2.kernel, self.stride
        return (self.granularity - 1) * s + k

    @property
    def halo(self) -> int:
        return self.conv2.padding

    @property
    def se_channels(self) -> int:
        if not self.se_reduction:
            return 0
        return int(round(self.se_reduction * self.c_in))

    def with_granularity(self, s: int) -> "BlockSpec":
        return replace(self, granularity=s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        d = dict(d)
        d["layers"] = tuple(ConvLayerSpec(**l) for l in d["layers"])
        if d.get("downsample") is not None:
            d["downsample"] = ConvLayerSpec(**d["downsample"])
        return cls(**d)


@dataclass(frozen=True)
class StaticOp:
    """A stem/head layer that is always executed densely.

    ``kind`` is ``"conv"`` (MAC-bearing), ``"pool"`` (windowed, no MACs) or
    ``"gpool"`` (global average to 1x1, no MACs).
    """

    name: str
    kind: str
    layer: ConvLayerSpec
    in_h: int
    in_w: int

    @property
    def out_h(self) -> int:
        return 1 if self.kind == "gpool" else self.layer.out_size(self.in_h)

    @property
    def out_w(self) -> int:
        return 1 if self.kind == "gpool" else self.layer.out_size(self.in_w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer"] = asdict(self.layer)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StaticOp":
        d = dict(d)
        d["layer"] = ConvLayerSpec(**d["layer"])
        return cls(**d)


@dataclass(frozen=True)
class StageSpec:
    """First block of a stage plus how many blocks the stage holds.

    Blocks after the first take the first block's output as input: no stride,
    no downsample, c_in equal to c_out.
    """

    block: BlockSpec
    block_count: int

    def __post_init__(self):
        if self.block_count < 1:
            raise InvalidShapeError("a stage needs at least one block")

    def expand(self, granularity: int | None = None) -> list[BlockSpec]:
        first = self.block
        if granularity is not None:
            first = first.with_granularity(granularity)
        out = [first]
        if self.block_count > 1:
            c2 = first.conv2
            rest = replace(
                first,
                layers=(
                    replace(first.conv1, c_in=first.c_out),
                    replace(c2, stride=1),
                    first.conv3,
                ),
                input_h=first.output_h,
                input_w=first.output_w,
                downsample=None,
                has_residual=True,
            )
            out.extend([rest] * (self.block_count - 1))
        return out


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    stages: tuple[StageSpec, ...]
    s_net: tuple[int, ...]
    stem_and_head: tuple[StaticOp, ...] = field(default=())

    def __post_init__(self):
        if len(self.s_net) != len(self.stages):
            raise InvalidShapeError("s_net needs one granularity per stage")
        # expansion validates S against each stage's output resolution
        for stage, s in zip(self.stages, self.s_net):
            stage.block.with_granularity(s)

    def blocks(self) -> list[BlockSpec]:
        out: list[BlockSpec] = []
        for stage, s in zip(self.stages, self.s_net):
            out.extend(stage.expand(s))
        return out

    def block_ids(self) -> list[str]:
        """Ids of the form ``"<stage>.<block>"``, both 1-based."""
        return [f"{i + 1}.{j + 1}" for i, st in enumerate(self.stages)
                for j in range(st.block_count)]

    def iter_stage_blocks(self) -> Iterator[tuple[int, list[BlockSpec]]]:
        for i, (stage, s) in enumerate(zip(self.stages, self.s_net)):
            yield i, stage.expand(s)

    @property
    def num_blocks(self) -> int:
        return sum(st.block_count for st in self.stages)

    def with_s_net(self, s_net) -> "NetworkSpec":
        return replace(self, s_net=tuple(int(s) for s in s_net))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stages": [{"block": st.block.to_dict(), "block_count": st.block_count}
                       for st in self.stages],
            "s_net": list(self.s_net),
            "stem_and_head": [op.to_dict() for op in self.stem_and_head],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            name=d["name"],
            stages=tuple(StageSpec(BlockSpec.from_dict(st["block"]), st["block_count"])
                         for st in d["stages"]),
            s_net=tuple(d["s_net"]),
            stem_and_head=tuple(StaticOp.from_dict(op) for op in d.get("stem_and_head", ())),
        )


def to_json(spec: Any, **kw) -> str:
    return json.dumps(spec.to_dict(), **kw)


def hardware_from_json(text: str) -> HardwareSpec:
    return HardwareSpec.from_dict(json.loads(text))


def network_from_json(text: str) -> NetworkSpec:
    return NetworkSpec.from_dict(json.loads(text))


def valid_granularities(feature_side: int) -> list[int]:
    """Proper divisors of ``feature_side`` (whole-feature skipping excluded)."""
    return [s for s in range(1, feature_side) if feature_side % s == 0]


# -- network presets ---------------------------------------------------------

_RESNET_DEPTHS = {"resnet50": (3, 4, 6, 3), "resnet101": (3, 4, 23, 3)}
# (depths, widths, group width); SE ratio 0.25 of the block input width
_REGNETY = {
    "regnety400mf": ((1, 3, 6, 6), (48, 104, 208, 440), 8),
    "regnety800mf": ((1, 3, 8, 2), (64, 144, 320, 784), 16),
}
_DEFAULT_S_NET = {
    "resnet50": (8, 4, 7, 1),
    "resnet101": (8, 4, 7, 1),
    "regnety400mf": (4, 4, 2, 1),
    "regnety800mf": (4, 4, 2, 1),
}


def network_names() -> list[str]:
    return list(_DEFAULT_S_NET)


def _default_s_net(name: str, stage_sides: list[int]) -> tuple[int, ...]:
    out = []
    for s, side in zip(_DEFAULT_S_NET[name], stage_sides):
        out.append(s if side % s == 0 and s < side else 1)
    return tuple(out)


def _resnet(name: str, res: int) -> tuple[list[StageSpec], list[StaticOp], list[int]]:
    stem_out = res // 2
    feat = res // 4
    stages, sides = [], []
    c_prev = 64
    for i, n in enumerate(_RESNET_DEPTHS[name]):
        width = 64 * 2 ** i
        stride = 1 if i == 0 else 2
        block = BlockSpec(
            layers=(ConvLayerSpec(c_prev, width, 1),
                    ConvLayerSpec(width, width, 3, stride),
                    ConvLayerSpec(width, 4 * width, 1)),
            input_h=feat, input_w=feat,
            downsample=ConvLayerSpec(c_prev, 4 * width, 1, stride),
        )
        stages.append(StageSpec(block, n))
        sides.append(block.output_h)
        feat = block.output_h
        c_prev = 4 * width
    static = [
        StaticOp("stem.conv", "conv", ConvLayerSpec(3, 64, 7, 2), res, res),
        StaticOp("stem.maxpool", "pool", ConvLayerSpec(64, 64, 3, 2, groups=64), stem_out, stem_out),
        StaticOp("head.avgpool", "gpool", ConvLayerSpec(c_prev, c_prev, 1, groups=c_prev),
                 feat, feat),
        StaticOp("head.fc", "conv", ConvLayerSpec(c_prev, 1000, 1), 1, 1),
    ]
    return stages, static, sides


def _regnety(name: str, res: int) -> tuple[list[StageSpec], list[StaticOp], list[int]]:
    depths, widths, gw = _REGNETY[name]
    feat = res // 2
    c_prev = 32
    stages, sides = [], []
    for n, w in zip(depths, widths):
        block = BlockSpec(
            layers=(ConvLayerSpec(c_prev, w, 1),
                    ConvLayerSpec(w, w, 3, 2, groups=w // gw),
                    ConvLayerSpec(w, w, 1)),
            input_h=feat, input_w=feat,
            downsample=ConvLayerSpec(c_prev, w, 1, 2),
            se_reduction=0.25,
        )
        stages.append(StageSpec(block, n))
        sides.append(block.output_h)
        feat = block.output_h
        c_prev = w
    static = [
        StaticOp("stem.conv", "conv", ConvLayerSpec(3, 32, 3, 2), res, res),
        StaticOp("head.avgpool", "gpool", ConvLayerSpec(c_prev, c_prev, 1, groups=c_prev),
                 feat, feat),
        StaticOp("head.fc", "conv", ConvLayerSpec(c_prev, 1000, 1), 1, 1),
    ]
    return stages, static, sides


def preset_network(name: str, input_resolution: int = 224,
                   s_net: tuple[int, ...] | None = None) -> NetworkSpec:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in _DEFAULT_S_NET:
        raise NotFoundError(f"unknown network preset {name!r}; choose from {network_names()}")
    if input_resolution < 32 or input_resolution % 32:
        raise InvalidShapeError(f"input resolution {input_resolution} must be a multiple of 32")
    build = _resnet if key.startswith("resnet") else _regnety
    stages, static, sides = build(key, input_resolution)
    if s_net is None:
        s_net = _default_s_net(key, sides)
    return NetworkSpec(key, tuple(stages), tuple(s_net), tuple(static))
