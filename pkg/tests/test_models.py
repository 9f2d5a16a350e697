import numpy as np
import pytest
from hypothesis import given, strategies as st

from paseg import nncore as nn
from paseg.core import Sample, TissueClass, UsImage
from paseg.models import (
    FcnnSpec, UNetSpec, UnsupportedCombinationError, assemble_input, build_fcnn, build_unet,
    fcnn_parameter_count, load_model, predict_labels, save_model,
)
from paseg.nncore import ShapeError, Tensor

from conftest import make_sample


def test_fcnn_parameter_counts():
    assert build_fcnn(FcnnSpec(26)).n_parameters() == 10043
    assert build_fcnn(FcnnSpec(27)).n_parameters() == 10807


@given(st.integers(1, 64))
def test_fcnn_count_formula(n):
    assert build_fcnn(FcnnSpec(n)).n_parameters() == fcnn_parameter_count(n)


def test_fcnn_shapes_and_validation():
    assert build_fcnn(FcnnSpec(26))(Tensor(np.zeros((1000, 26), np.float32))).shape == (1000, 7)
    with pytest.raises(ValueError):
        FcnnSpec(0)


@pytest.mark.parametrize("n_in", [1, 26, 27])
def test_unet_shape_contract(n_in):
    model = build_unet(UNetSpec(n_in, base_channels=4))
    assert model(Tensor(np.zeros((2, n_in, 32, 32), np.float32))).shape == (2, 7, 32, 32)


def test_unet_rejects_indivisible_input():
    model = build_unet(UNetSpec(1, base_channels=2))
    with pytest.raises(ShapeError, match="divisible"):
        model(Tensor(np.zeros((1, 1, 100, 100), np.float32)))
    with pytest.raises(ShapeError, match="channels"):
        model(Tensor(np.zeros((1, 2, 32, 32), np.float32)))


def test_unet_layer_names_and_head():
    model = build_unet(UNetSpec(27, base_channels=4))
    names = [p.name for p in model.parameters()]
    assert names[0] == "down0.conv1.w" and names[-1] == "head.b"
    assert model.head.w.shape == (7, 4, 3, 3)  # 3x3 output convolution
    assert model.bottom[0].w.shape == (64, 32, 3, 3)


def test_unet_inference_deterministic():
    model = build_unet(UNetSpec(26, base_channels=2))
    s = make_sample(h=16, w=16)
    a = predict_labels(model, s, "PA").values
    np.testing.assert_array_equal(a, predict_labels(model, s, "PA").values)


def test_forced_bias_gives_other_tissue():
    model = build_unet(UNetSpec(26, base_channels=2))
    model.head.b.data[:] = 0
    model.head.b.data[TissueClass.OTHER_TISSUE] = 1e4
    out = predict_labels(model, make_sample(h=16, w=16), "PA").values
    assert np.all(out == TissueClass.OTHER_TISSUE)


def test_argmax_ties_lowest_code():
    model = build_fcnn(FcnnSpec(26))
    for p in model.parameters():
        p.data[:] = 0
    assert np.all(predict_labels(model, make_sample(), "PA").values == 0)


def test_fcnn_us_rejected():
    with pytest.raises(UnsupportedCombinationError):
        predict_labels(build_fcnn(FcnnSpec(26)), make_sample(), "US")


def test_channel_mismatch_rejected():
    with pytest.raises(UnsupportedCombinationError):
        predict_labels(build_fcnn(FcnnSpec(26)), make_sample(), "PAUS")


def test_paus_label_map_contract():
    model = build_unet(UNetSpec(27, base_channels=2))
    out = predict_labels(model, make_sample(h=32, w=32), "PAUS").values
    assert out.shape == (32, 32) and out.max() <= 6


def test_assemble_input_layout():
    s = make_sample(h=4, w=4)
    x = assemble_input(s.pa.values, s.us.values, "PAUS")
    assert x.shape == (27, 4, 4)
    np.testing.assert_array_equal(x[:26], s.pa.values)
    assert x[26].min() == 0 and x[26].max() == 1


@pytest.mark.parametrize("arch", ["unet", "fcnn"])
def test_us_channel_wiring(arch):
    model = build_unet(UNetSpec(27, base_channels=2), seed=3) if arch == "unet" else build_fcnn(FcnnSpec(27), seed=3)
    s = make_sample(h=16, w=16, seed=4)
    zero_us = Sample(s.id, s.pa, UsImage(np.zeros_like(s.us.values)), s.labels, s.meta)
    a = predict_labels(model, zero_us, "PAUS").values
    model.parameters()[0].data[:, 26] = 0  # first-layer weights of input channel 27
    b = predict_labels(model, s, "PAUS").values
    np.testing.assert_array_equal(a, b)


def test_model_checkpoint_round_trip(tmp_path):
    model = build_unet(UNetSpec(27, base_channels=2, dropout=0.1), seed=1)
    save_model(tmp_path / "m.ckpt", model, "PAUS", seed=1, epoch=4)
    loaded, header = load_model(tmp_path / "m.ckpt")
    assert header["input_mode"] == "PAUS" and header["epoch"] == "4"
    assert loaded.spec == model.spec
    for p, q in zip(model.parameters(), loaded.parameters()):
        assert p.name == q.name
        np.testing.assert_array_equal(p.data, q.data)


def test_full_unet_gradcheck():
    model = build_unet(UNetSpec(3, base_channels=2, depth=2), seed=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 8, 8)))
    r = Tensor(np.random.default_rng(1).standard_normal((1, 7, 8, 8)))
    err = nn.gradcheck(lambda: (model(x) * r).sum(), model.parameters(), max_entries=6)
    assert err < 1e-4
