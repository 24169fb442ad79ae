import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynlat.errors import InvalidShapeError, NotFoundError
from dynlat.model import (BlockSpec, ConvLayerSpec, HardwareSpec, NetworkSpec, hardware_from_json,
                          hardware_names, network_from_json, network_names, preset_hardware,
                          preset_network, to_json, valid_granularities)
from dynlat.simexec import random_desk_block


@pytest.mark.parametrize("name, pe, lanes, mhz, gbs", [
    ("v100", 80, 64, 1500, 700),
    ("nano", 1, 128, 921, 25.6),
    ("tx2", 2, 128, 1300, 59.7),
    ("gtx1080", 20, 64, 1700, 320),
])
def test_hardware_presets_match_device_table(name, pe, lanes, mhz, gbs):
    hw = preset_hardware(name)
    assert hw.num_pe == pe
    assert hw.fp32_lanes_per_pe == lanes
    assert hw.frequency == pytest.approx(mhz * 1e6)
    assert hw.offchip_bandwidth == pytest.approx(gbs * 1e9)


def test_hardware_default_extension_fields():
    hw = preset_hardware("v100")
    assert hw.txn_bytes == 128
    assert hw.onchip_global_bandwidth == pytest.approx(10 * hw.offchip_bandwidth)
    assert hw.local_bandwidth_per_pe == pytest.approx(64 * 8 * 1.5e9)
    assert hw.fma_per_lane_per_cycle == 1
    assert hw.pe_macs_per_second == pytest.approx(9.6e10)
    assert hw.peak_macs_per_second == pytest.approx(7.68e12)


def test_unknown_hardware():
    with pytest.raises(NotFoundError):
        preset_hardware("v101")


def test_hardware_rejects_nonpositive():
    with pytest.raises(ValueError):
        HardwareSpec.from_table("bad", 0, 64, 1000, 100)


def test_resnet101_structure():
    net = preset_network("resnet101", 224)
    assert tuple(st.block_count for st in net.stages) == (3, 4, 23, 3)
    first = net.blocks()[0]
    assert (first.output_h, first.output_w) == (56, 56)
    assert net.num_blocks == 33
    assert net.s_net == (8, 4, 7, 1)


def test_resnet50_structure():
    net = preset_network("resnet50", 224)
    assert tuple(st.block_count for st in net.stages) == (3, 4, 6, 3)


def test_resolution_must_divide():
    with pytest.raises(InvalidShapeError):
        preset_network("resnet50", 225)


def test_unknown_network():
    with pytest.raises(NotFoundError):
        preset_network("vgg16")


def test_block_ids_are_one_based():
    ids = preset_network("resnet50").block_ids()
    assert ids[:4] == ["1.1", "1.2", "1.3", "2.1"]
    assert ids[-1] == "4.3"


@pytest.mark.parametrize("side, expected", [
    (56, [1, 2, 4, 7, 8, 14, 28]),
    (7, [1]),
    (1, []),
])
def test_valid_granularities(side, expected):
    assert valid_granularities(side) == expected


def test_granularity_must_divide_output():
    block = preset_network("resnet101").blocks()[0]
    with pytest.raises(InvalidShapeError):
        block.with_granularity(5)


def test_s_net_length_checked():
    net = preset_network("resnet101")
    with pytest.raises(InvalidShapeError):
        net.with_s_net((8, 4, 7))


def test_layer_channels_must_chain():
    with pytest.raises(InvalidShapeError):
        BlockSpec((ConvLayerSpec(8, 4), ConvLayerSpec(8, 8, 3), ConvLayerSpec(8, 8)), 8, 8)


def test_groups_must_divide():
    with pytest.raises(InvalidShapeError):
        ConvLayerSpec(6, 8, 3, groups=4)


@pytest.mark.parametrize("name", network_names())
def test_network_json_round_trip(name):
    net = preset_network(name)
    assert network_from_json(to_json(net)) == net


@pytest.mark.parametrize("name", hardware_names())
def test_hardware_json_round_trip(name):
    hw = preset_hardware(name)
    assert hardware_from_json(to_json(hw)) == hw


@given(st.integers(0, 10_000))
def test_block_round_trip(seed):
    block = random_desk_block(np.random.default_rng(seed))
    assert BlockSpec.from_dict(block.to_dict()) == block


@given(st.integers(1, 256), st.integers(1, 512), st.floats(100, 3000), st.floats(1, 2000))
def test_hardware_dict_round_trip(pe, lanes, mhz, gbs):
    hw = HardwareSpec.from_table("x", pe, lanes, mhz, gbs)
    assert HardwareSpec.from_dict(hw.to_dict()) == hw


def test_network_dict_rejects_bad_s_net():
    d = preset_network("resnet50").to_dict()
    d["s_net"] = [5, 4, 7, 1]
    with pytest.raises(InvalidShapeError):
        NetworkSpec.from_dict(d)
