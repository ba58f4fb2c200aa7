import json

import numpy as np
import pytest

from dasrf.backbones import BackboneSpec, build, parameter_count, receptive_layers
from dasrf.errors import ConfigurationError, DimensionError
from dasrf.rf import theoretical_rf
from dasrf.temporal import ShiftConfig
from dasrf.tensor import Tensor


@pytest.mark.parametrize("spec", [
    BackboneSpec(depth=3, width=8, num_classes=10),
    BackboneSpec(kind="mini_resnet", depth=3, width=8, num_classes=10),
    BackboneSpec(depth=2, width=16, num_classes=4, norm=True, shift_points=(0,), shift=ShiftConfig("gated_shift")),
    BackboneSpec(kind="mini_resnet", depth=2, width=8, head="dense_predictor", num_classes=3, downsample=(1,)),
])
def test_parameter_count_matches_model(spec):
    model = build(spec, 0)
    assert parameter_count(spec) == sum(p.size for p in model.params.values())


def test_known_parameter_counts():
    assert parameter_count(BackboneSpec(depth=3, width=8, num_classes=10)) == 1482


def test_output_shapes():
    x = np.random.default_rng(0).random((6, 3, 8, 8))
    clf = build(BackboneSpec(depth=2, width=8, num_classes=5, shift_points=(0,)), 0)
    assert clf(x, frames=3).shape == (6, 5)
    seg = build(BackboneSpec(kind="mini_resnet", depth=2, width=8, head="dense_predictor", num_classes=2,
                             downsample=(0,)), 0)
    assert seg(x).shape == (6, 2, 8, 8)
    assert seg.forward_video(Tensor(x.reshape(2, 3, 3, 8, 8))).shape == (2, 3, 2, 8, 8)
    with pytest.raises(DimensionError):
        clf(x, frames=4)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        BackboneSpec(kind="vgg")
    with pytest.raises(ConfigurationError):
        BackboneSpec(kind="mini_resnet", depth=21)
    with pytest.raises(ConfigurationError):
        BackboneSpec(depth=2, shift_points=(5,))
    with pytest.raises(ConfigurationError):
        BackboneSpec(width=4, shift_points=(0,))         # 1/8 of 4 channels moves nothing
    with pytest.raises(ConfigurationError):
        BackboneSpec(shift_points=(0,), shift=ShiftConfig(insertion_points=(1,)))


def test_spec_json_round_trip(tmp_path):
    spec = BackboneSpec(kind="mini_resnet", depth=2, width=8, num_classes=3, shift_points=(1,), norm=True)
    path = tmp_path / "b.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert BackboneSpec.load(path) == spec
    assert BackboneSpec.from_dict({"head": {"classifier": 7}}).num_classes == 7
    with pytest.raises(ConfigurationError):
        BackboneSpec.from_dict({"colour": "red"})
    with pytest.raises(ConfigurationError):
        BackboneSpec.load(tmp_path / "missing.json")


def test_state_round_trip_and_eval_mode():
    spec = BackboneSpec(depth=2, width=8, num_classes=2, norm=True)
    a, b = build(spec, 0), build(spec, 1)
    x = np.random.default_rng(0).random((4, 3, 6, 6))
    a(x)                                 # updates running statistics
    b.load_state(a.state())
    a.eval(), b.eval()
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_receptive_layers_follow_depth():
    assert theoretical_rf(receptive_layers(BackboneSpec(depth=3))) == 7
    assert theoretical_rf(receptive_layers(BackboneSpec(depth=2, downsample=(0,)))) == 7
