"""Model construction, tracing, training, and persistence."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pathscope as ps
from pathscope import ops
from pathscope.errors import ArgumentError, FormatError, NumericalError, ShapeError, SpecError
from pathscope.model import (
    _forward_batch,
    desk_spec,
    layer_output_shape,
    param_shapes,
    predict_batch,
    serialize_model,
)

from conftest import make_tiny_weights


def test_layer_naming_desk():
    names = ps.layer_names(desk_spec())
    assert names == ["conv1.conv", "conv1.relu", "conv2.conv", "conv2.relu",
                     "conv3.conv", "conv3.relu", "pool1", "dropout1", "flatten1", "fc1"]


def test_reference_spec_shapes():
    spec = ps.reference_spec()
    shapes = param_shapes(spec)
    assert shapes["conv1.conv"] == (32, 1, 3, 3)
    for i in range(2, 6):
        assert shapes[f"conv{i}.conv"] == (32, 32, 3, 3)
    assert shapes["fc1"] == (10, 32 * 14 * 14)


def test_build_model_deterministic():
    spec = desk_spec()
    w1 = ps.build_model(spec, 42)
    w2 = ps.build_model(spec, 42)
    for k in w1:
        np.testing.assert_array_equal(w1[k], w2[k])
    w3 = ps.build_model(spec, 43)
    assert any(not np.array_equal(w1[k], w3[k]) for k in w1)


def test_build_model_he_scaling():
    spec = ps.reference_spec()
    w = ps.build_model(spec, 0)
    kern = w["conv2.conv"]  # fan_in = 32*3*3 = 288
    expected = np.sqrt(2.0 / 288)
    assert abs(kern.std() / expected - 1) < 0.2
    assert abs(kern.mean()) < 0.01


def test_spec_errors():
    # fc before flatten
    with pytest.raises(SpecError):
        ps.layer_names(ps.ModelSpec((1, 4, 4), 2, (ps.fc(2),)))
    # final shape mismatch
    with pytest.raises(SpecError):
        ps.layer_names(ps.ModelSpec((1, 4, 4), 2, (ps.flatten(), ps.fc(3))))
    # pool window too large
    with pytest.raises(SpecError):
        ps.layer_names(ps.ModelSpec((1, 4, 4), 2, (ps.maxpool(5, 5), ps.flatten(), ps.fc(2))))


def test_forward_zero_input_is_all_zero(small_conv_model):
    spec, weights = small_conv_model
    trace = ps.forward(weights, spec, np.zeros(spec.input_shape, dtype=np.float32))
    for name in trace.names:
        assert np.all(trace.output(name) == 0), name
    assert np.all(trace.logits == 0)


def test_forward_shape_mismatch(small_conv_model):
    spec, weights = small_conv_model
    with pytest.raises(ShapeError):
        ps.forward(weights, spec, np.zeros((1, 5, 5), dtype=np.float32))


def test_forward_matches_op_composition(small_conv_model):
    spec, weights = small_conv_model
    rng = np.random.default_rng(3)
    x = rng.random(spec.input_shape).astype(np.float32)
    trace = ps.forward(weights, spec, x)
    h = ops.conv2d_forward(x, weights["conv1.conv"], 1, 1)
    np.testing.assert_array_equal(trace.output("conv1.conv"), h)
    h = ops.relu_forward(h)
    np.testing.assert_array_equal(trace.output("conv1.relu"), h)
    h, _ = ops.maxpool_forward(h, 2, 2)
    np.testing.assert_array_equal(trace.output("pool1"), h)
    logits = ops.fc_forward(h.reshape(-1), weights["fc1"])
    np.testing.assert_array_equal(trace.logits, logits)


@given(st.floats(0.1, 10.0))
@settings(max_examples=20, deadline=None)
def test_positive_homogeneity(c):
    spec = ps.ModelSpec((1, 6, 6), 3, (ps.conv(2, 3, 1, 1), ps.relu(), ps.maxpool(2, 2),
                                       ps.flatten(), ps.fc(3)))
    weights = ps.build_model(spec, 11)
    x = np.random.default_rng(5).standard_normal((1, 6, 6))
    base = ps.forward(weights, spec, x).logits
    scaled = ps.forward(weights, spec, c * x).logits
    np.testing.assert_allclose(scaled, c * base, rtol=1e-5, atol=1e-9)


def test_first_conv_scales_linearly(small_conv_model):
    spec, weights = small_conv_model
    x = np.random.default_rng(6).standard_normal(spec.input_shape)
    a = ps.forward(weights, spec, x).output("conv1.conv")
    b = ps.forward(weights, spec, 3.0 * x).output("conv1.conv")
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-6)


def test_pre_activation_accessor(small_conv_model):
    spec, weights = small_conv_model
    x = np.random.default_rng(8).random(spec.input_shape).astype(np.float32)
    trace = ps.forward(weights, spec, x)
    np.testing.assert_array_equal(trace.pre_activation("conv1.conv"), x)
    np.testing.assert_array_equal(
        trace.output("conv1.relu"), np.maximum(trace.pre_activation("conv1.relu"), 0))


def test_gradient_wrt_layer_matches_finite_difference():
    # Tail from the probed layer is conv -> relu -> flatten -> fc; finite
    # differences are valid away from the relu kink, so guard the margin.
    spec = ps.ModelSpec((1, 5, 5), 3,
                        (ps.conv(2, 3, 1, 1), ps.relu(), ps.conv(2, 3, 1, 1), ps.relu(),
                         ps.flatten(), ps.fc(3)))
    weights = ps.build_model(spec, 19)
    x = np.random.default_rng(13).standard_normal(spec.input_shape)
    trace = ps.forward(weights, spec, x)
    layer = "conv1.relu"
    h = 1e-6
    kink_margin = np.abs(trace.output("conv2.conv")).min()
    assert kink_margin > 100 * h  # probe steps cannot flip any downstream relu
    grad = ps.gradient_wrt_layer(weights, spec, trace, layer, class_index=1)
    act = trace.output(layer).astype(np.float64)
    fd = np.zeros_like(act)
    flat = act.reshape(-1)
    fdflat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = ps.forward_from_layer(weights, spec, layer, act)[1]
        flat[i] = orig - h
        dn = ps.forward_from_layer(weights, spec, layer, act)[1]
        flat[i] = orig
        fdflat[i] = (up - dn) / (2 * h)
    denom = max(np.abs(fd).max(), 1e-12)
    assert np.abs(grad - fd).max() / denom < 1e-3


def test_gradient_wrt_layer_checks_args(small_conv_model):
    spec, weights = small_conv_model
    trace = ps.forward(weights, spec, np.zeros(spec.input_shape, dtype=np.float32))
    with pytest.raises(ArgumentError):
        ps.gradient_wrt_layer(weights, spec, trace, "nope", 0)
    with pytest.raises(ArgumentError):
        ps.gradient_wrt_layer(weights, spec, trace, "conv1.relu", 99)


def test_forward_from_layer_identity_resume(small_conv_model):
    spec, weights = small_conv_model
    x = np.random.default_rng(14).random(spec.input_shape).astype(np.float32)
    trace = ps.forward(weights, spec, x)
    for name in trace.names:
        resumed = ps.forward_from_layer(weights, spec, name, trace.output(name))
        np.testing.assert_array_equal(resumed, trace.logits)


def test_train_lr_zero_like_no_change():
    # lr must be > 0 by contract; a single tiny step changes weights
    spec = ps.ModelSpec((1, 4, 4), 2, (ps.flatten(), ps.fc(2)))
    weights = ps.build_model(spec, 0)
    ds = ps.Dataset(np.random.default_rng(0).random((8, 1, 4, 4)).astype(np.float32),
                    np.array([0, 1] * 4, dtype=np.int64), 2)
    with pytest.raises(ArgumentError):
        ps.TrainConfig(learning_rate=0.0)
    w2, hist = ps.train_sgd(weights, spec, ds, ps.TrainConfig(1e-12, 1, 8, 0))
    np.testing.assert_allclose(w2["fc1"], weights["fc1"], atol=1e-9)
    assert len(hist) == 1


def test_train_separable_blobs_reaches_95():
    ds = ps.synthetic_blobs(200, classes=2, image_hw=12, seed=0)
    spec = ps.ModelSpec((1, 12, 12), 2,
                        (ps.conv(4, 3, 1, 1), ps.relu(), ps.maxpool(2, 2),
                         ps.flatten(), ps.fc(2)))
    weights = ps.build_model(spec, 1)
    w2, hist = ps.train_sgd(weights, spec, ds, ps.TrainConfig(0.05, 20, 32, 0))
    assert ps.evaluate_accuracy(w2, spec, ds) >= 0.95
    assert hist[-1] < hist[0]


def test_train_deterministic():
    ds = ps.synthetic_blobs(60, classes=3, image_hw=10, seed=3)
    spec = ps.ModelSpec((1, 10, 10), 3,
                        (ps.conv(2, 3, 1, 1), ps.relu(), ps.dropout(0.25),
                         ps.flatten(), ps.fc(3)))
    weights = ps.build_model(spec, 5)
    w_a, _ = ps.train_sgd(weights, spec, ds, ps.TrainConfig(0.05, 2, 16, 9))
    w_b, _ = ps.train_sgd(weights, spec, ds, ps.TrainConfig(0.05, 2, 16, 9))
    assert ps.model_digest(w_a, spec) == ps.model_digest(w_b, spec)


def test_train_nan_aborts():
    spec = ps.ModelSpec((1, 2, 2), 2, (ps.flatten(), ps.fc(2)))
    weights = {"fc1": np.full((2, 4), np.nan, dtype=np.float32)}
    ds = ps.Dataset(np.ones((4, 1, 2, 2), dtype=np.float32),
                    np.array([0, 1, 0, 1], dtype=np.int64), 2)
    with pytest.raises(NumericalError):
        ps.train_sgd(weights, spec, ds, ps.TrainConfig(0.1, 1, 4, 0))


def test_evaluate_accuracy_contracts(small_conv_model):
    spec, weights = small_conv_model
    with pytest.raises(ArgumentError):
        ps.evaluate_accuracy(weights, spec, ps.Dataset(
            np.zeros((0, 1, 6, 6), dtype=np.float32), np.zeros(0, dtype=np.int64), 3))
    rng = np.random.default_rng(2)
    images = rng.random((40, 1, 6, 6)).astype(np.float32)
    preds = predict_batch(weights, spec, images)
    ds = ps.Dataset(images, preds, 3)
    assert ps.evaluate_accuracy(weights, spec, ds) == 1.0


def test_random_model_chance_level():
    spec = desk_spec()
    weights = ps.build_model(spec, 123)
    ds = ps.synthetic_digits(400, seed=17)
    acc = ps.evaluate_accuracy(weights, spec, ds)
    assert 0.0 <= acc <= 0.35  # chance is 0.1; untrained models sit near it


def test_eval_via_traces_matches_batched(small_conv_model):
    spec, weights = small_conv_model
    rng = np.random.default_rng(21)
    images = rng.random((16, 1, 6, 6)).astype(np.float32)
    batched = predict_batch(weights, spec, images)
    solo = np.array([int(np.argmax(ps.forward(weights, spec, img).logits))
                     for img in images])
    np.testing.assert_array_equal(batched, solo)


def test_dropout_training_only():
    spec = ps.ModelSpec((1, 4, 4), 2,
                        (ps.dropout(0.5), ps.flatten(), ps.fc(2)))
    weights = ps.build_model(spec, 0)
    x = np.ones((3, 1, 4, 4), dtype=np.float32)
    eval_logits, _ = _forward_batch(weights, spec, x)
    rng = np.random.default_rng(0)
    train_logits, _ = _forward_batch(weights, spec, x, train=True, drop_rng=rng)
    assert not np.array_equal(eval_logits, train_logits)
    eval_again, _ = _forward_batch(weights, spec, x)
    np.testing.assert_array_equal(eval_logits, eval_again)


# --- persistence ---

def test_save_load_round_trip(tmp_path, small_conv_model):
    spec, weights = small_conv_model
    p = tmp_path / "m.npsc"
    ps.save_model(weights, spec, p)
    spec2, weights2 = ps.load_model(p)
    assert spec2 == spec
    for k in weights:
        np.testing.assert_array_equal(weights[k], weights2[k])
    ps.save_model(weights2, spec2, tmp_path / "m2.npsc")
    assert (tmp_path / "m.npsc").read_bytes() == (tmp_path / "m2.npsc").read_bytes()


def test_loaded_model_reproduces_logits(tmp_path, small_conv_model):
    spec, weights = small_conv_model
    x = np.random.default_rng(31).random(spec.input_shape).astype(np.float32)
    base = ps.forward(weights, spec, x).logits
    p = tmp_path / "m.npsc"
    ps.save_model(weights, spec, p)
    spec2, weights2 = ps.load_model(p)
    np.testing.assert_array_equal(ps.forward(weights2, spec2, x).logits, base)


def test_load_rejects_bad_magic(tmp_path, small_conv_model):
    spec, weights = small_conv_model
    p = tmp_path / "m.npsc"
    ps.save_model(weights, spec, p)
    data = bytearray(p.read_bytes())
    data[:4] = b"XXXX"
    bad = tmp_path / "bad.npsc"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        ps.load_model(bad)


def test_load_rejects_truncation(tmp_path, small_conv_model):
    spec, weights = small_conv_model
    p = tmp_path / "m.npsc"
    ps.save_model(weights, spec, p)
    data = p.read_bytes()
    bad = tmp_path / "short.npsc"
    bad.write_bytes(data[:-5])
    with pytest.raises(FormatError):
        ps.load_model(bad)


def test_load_rejects_trailing_garbage(tmp_path, small_conv_model):
    spec, weights = small_conv_model
    p = tmp_path / "m.npsc"
    ps.save_model(weights, spec, p)
    bad = tmp_path / "long.npsc"
    bad.write_bytes(p.read_bytes() + b"\x00\x00")
    with pytest.raises(FormatError):
        ps.load_model(bad)


def test_digest_changes_with_weights(tiny_spec):
    w = make_tiny_weights()
    d1 = ps.model_digest(w, tiny_spec)
    w2 = {k: v.copy() for k, v in w.items()}
    w2["fc1"][0, 0] += 1.0
    assert ps.model_digest(w2, tiny_spec) != d1
    assert len(d1) == 64


def test_serialize_header_is_json(tiny_spec):
    import json
    import struct
    blob = serialize_model(make_tiny_weights(), tiny_spec)
    assert blob[:4] == b"NPSC" and blob[4] == 1
    (hlen,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9:9 + hlen])
    assert header["num_classes"] == 2
    assert [t["name"] for t in header["tensors"]] == ["fc1", "fc2"]
