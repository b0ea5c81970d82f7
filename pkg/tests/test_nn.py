import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import adam_scalar, bce_scalar, conv3d_loops, maxpool_loops
from scanadapt.errors import ConfigError, InputError, NumericError, ParseError
from scanadapt.nn import (MLP, AdamState, Conv3d, LayerSpec, Linear, Tensor, activation_backward,
                          activation_forward, adam_step, bce, bce_backward, conv3d_forward,
                          grad_check, load_checkpoint, maxpool3d_forward, mlp_forward,
                          save_checkpoint, sigmoid)
from scanadapt import verify


def conv_spec(cin, cout, k=3, s=1, p=1):
    return LayerSpec("conv3d", k, s, p, cin, cout)


# -- tensor / spec -----------------------------------------------------------

def test_tensor_grad_shape_checked():
    with pytest.raises(ConfigError):
        Tensor(np.zeros((2, 3)), grad=np.zeros(3))


def test_layer_spec_rejects_collapsed_extent():
    with pytest.raises(ConfigError):
        conv_spec(1, 1, k=3, p=0).output_extent(2)
    assert conv_spec(1, 1, k=3, s=2, p=1).output_extent(8) == 4


# -- convolution -------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 6))
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0] = w[1, 1] = 1
    y, _ = conv3d_forward(x, conv_spec(2, 2, 1, 1, 0), w, np.zeros(2))
    assert np.array_equal(y, x)


def test_conv_all_ones_interior():
    cin = 3
    x = np.ones((cin, 5, 5, 5))
    y, _ = conv3d_forward(x, conv_spec(cin, 1, 3, 1, 1), np.ones((1, cin, 3, 3, 3)), np.zeros(1))
    assert y[0, 2, 2, 2] == 27 * cin
    assert y[0, 0, 0, 0] == 8 * cin  # corner sees zero padding


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 5, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    y, _ = conv3d_forward(x, conv_spec(2, 3, 3, stride, padding), w, b)
    np.testing.assert_allclose(y, conv3d_loops(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ConfigError):
        conv3d_forward(np.zeros((3, 4, 4, 4)), conv_spec(2, 1), np.zeros((1, 2, 3, 3, 3)), None)
    with pytest.raises(ConfigError):
        conv3d_forward(np.zeros((2, 4, 4, 4)), conv_spec(2, 1), np.zeros((1, 2, 2, 2, 2)), None)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 32 - 1))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 4, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    spec = conv_spec(2, 2)
    lhs, _ = conv3d_forward(a * x + b * y, spec, w, None)
    fx, _ = conv3d_forward(x, spec, w, None)
    fy, _ = conv3d_forward(y, spec, w, None)
    np.testing.assert_allclose(lhs, a * fx + b * fy, rtol=0, atol=1e-10)


def test_conv_deterministic():
    def run():
        conv = Conv3d(2, 3, rng=np.random.default_rng(5))
        return conv.forward(np.random.default_rng(6).normal(size=(2, 2, 6, 6, 6)).astype(np.float32))[0]
    assert np.array_equal(run(), run())


def test_maxpool_matches_oracle():
    x = np.random.default_rng(1).normal(size=(1, 3, 6, 4, 8))
    y, _ = maxpool3d_forward(x, LayerSpec("maxpool3d", 2, 2))
    assert np.array_equal(y[0], maxpool_loops(x[0]))


def test_weight_init_range():
    lin = Linear(25, 7, np.random.default_rng(0), np.float64)
    assert np.abs(lin.weight.data).max() <= 1 / 5
    conv = Conv3d(2, 4, 3, rng=np.random.default_rng(0), dtype=np.float64)
    assert np.abs(conv.weight.data).max() <= 1 / math.sqrt(54)


# -- fully connected ---------------------------------------------------------

def fc(i, o, act="none"):
    return LayerSpec("fc", in_channels=i, out_channels=o, activation=act)


def test_mlp_zero_weights_sigmoid_half():
    out = mlp_forward(np.ones((3, 4)), [(fc(4, 1, "sigmoid"), np.zeros((4, 1)), np.zeros(1))])
    assert np.all(out == 0.5)


def test_mlp_identity_layer():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(mlp_forward(x, [(fc(3, 3), np.eye(3), np.zeros(3))]), x)


def test_mlp_two_layer_matches_matrix_oracle():
    rng = np.random.default_rng(2)
    w1, b1, w2, b2 = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 2)), rng.normal(size=2)
    x = rng.normal(size=(7, 4))
    got = mlp_forward(x, [(fc(4, 6, "relu"), w1, b1), (fc(6, 2, "sigmoid"), w2, b2)])
    h = np.maximum(x @ w1 + b1, 0)
    np.testing.assert_allclose(got, 1 / (1 + np.exp(-(h @ w2 + b2))), rtol=1e-14)


def test_mlp_dimension_mismatch():
    with pytest.raises(ConfigError):
        mlp_forward(np.ones((1, 4)), [(fc(4, 2), np.zeros((3, 2)), np.zeros(2))])
    with pytest.raises(ConfigError):
        MLP([3, 2], ["relu", "relu"])


def test_mlp_predict_equals_forward():
    rng = np.random.default_rng(3)
    mlp = MLP([5, 8, 8, 1], ["relu", "relu", "sigmoid"], rng)
    x = rng.normal(size=(33, 5)).astype(np.float32)
    assert np.array_equal(mlp.predict(x), mlp.forward(x)[0])
    # single rows give the same bits as rows inside a batch
    assert np.array_equal(mlp.predict(x[4:5]), mlp.predict(x)[4:5])


def test_sigmoid_stable_for_large_inputs():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5


def test_nonfinite_is_hard_error():
    mlp = MLP([2, 1], ["none"], np.random.default_rng(0), np.float64)
    with pytest.raises(NumericError):
        mlp.forward(np.array([[np.nan, 1.0]]))


# -- BCE ---------------------------------------------------------------------

def test_bce_half():
    assert abs(bce(np.array([0.5]), np.array([1.0])) - 0.693147) < 1e-6


def test_bce_clamped_zero():
    assert bce(np.array([1.0]), np.array([1.0])) <= 1e-6
    assert bce(np.array([0.0]), np.array([0.0])) <= 1e-6


def test_bce_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    p, t = rng.random(50), rng.random(50)
    assert bce(p, t) == pytest.approx(np.mean([bce_scalar(a, b) for a, b in zip(p, t)]),
                                      rel=1e-14)


def test_bce_target_range():
    with pytest.raises(InputError):
        bce(np.array([0.5]), np.array([1.5]))


def test_bce_logit_gradient_identity():
    z = np.linspace(-4, 4, 9)
    t = np.array([0, 1, 0, 1, 1, 0, 0, 1, 1.0])
    p = sigmoid(z)
    dz = activation_backward(bce_backward(p, t) * len(z), p, "sigmoid")
    np.testing.assert_allclose(dz, p - t, atol=1e-12)


@given(p=st.floats(0, 1), t=st.floats(0, 1))
def test_bce_nonnegative(p, t):
    assert bce(np.array([p]), np.array([t])) >= 0


@given(p=st.floats(0, 1))
def test_bce_zero_only_at_target(p):
    """For hard targets the loss vanishes (up to clamping) only when pred equals target."""
    for t in (0.0, 1.0):
        loss = bce(np.array([p]), np.array([t]))
        if abs(p - t) > 1e-3:
            assert loss > 1e-4


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"a": Tensor(np.array([1.0, -2.0]), grad=np.zeros(2))}
    st_ = AdamState()
    adam_step(p, st_)
    assert np.array_equal(p["a"].data, [1.0, -2.0]) and st_.step == 1


def test_adam_first_step_sign():
    g = np.array([3.0, -0.5, 1e3])
    p = {"a": Tensor(np.zeros(3), grad=g.copy())}
    adam_step(p, AdamState(lr=1e-4))
    np.testing.assert_allclose(p["a"].data, -1e-4 * np.sign(g), rtol=1e-6)


def test_adam_quadratic_matches_scalar_reference():
    target = 0.7
    p = {"x": Tensor(np.array([2.0]))}
    st_ = AdamState(lr=1e-1)
    got = []
    for _ in range(10):
        p["x"].grad = 2 * (p["x"].data - target)
        adam_step(p, st_)
        got.append(float(p["x"].data[0]))
    ref = adam_scalar(2.0, lambda th: 2 * (th - target), lr=1e-1)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
    assert st_.step == 10


def test_adam_shape_mismatch():
    p = {"a": Tensor(np.zeros(3))}
    p["a"].grad = np.zeros(2)
    with pytest.raises(ConfigError):
        adam_step(p, AdamState())


# -- gradient checks ---------------------------------------------------------

def test_grad_check_square():
    x = Tensor(np.array([3.0]))

    def f():
        x.grad = 2 * x.data
        return float(x.data[0] ** 2)
    assert grad_check(f, {"x": x}) <= 1e-9


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.array([3.0]))

    def f():
        x.grad = 3 * x.data
        return float(x.data[0] ** 2)
    assert grad_check(f, {"x": x}) > 0.1


def test_grad_check_nonfinite_gradient():
    x = Tensor(np.array([1.0]))

    def f():
        x.grad = np.array([np.inf])
        return 0.0
    with pytest.raises(NumericError):
        grad_check(f, {"x": x})


@pytest.mark.parametrize("name", [n for n in verify.CHECKS if n not in ("ifnet", "cdff_fused")])
def test_layer_gradients(name):
    assert verify.CHECKS[name](seed=3) < verify.TOLERANCE


def test_activation_roundtrip_names():
    x = np.array([-1.0, 2.0])
    assert np.array_equal(activation_forward(x, "none"), x)
    assert np.array_equal(activation_forward(x, "relu"), [0.0, 2.0])


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    t = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.array([7.0], np.float32),
         "ünï": rng.normal(size=(2, 1, 2)).astype(np.float32)}
    save_checkpoint(tmp_path / "c", t)
    back = load_checkpoint(tmp_path / "c")
    assert list(back) == list(t)
    for k in t:
        assert back[k].tobytes() == t[k].tobytes()
    save_checkpoint(tmp_path / "d", back)
    assert (tmp_path / "c").read_bytes() == (tmp_path / "d").read_bytes()


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(tmp_path / "c", {"x": np.zeros((2,), np.float32)})
    raw = (tmp_path / "c").read_bytes()
    assert raw[:4] == b"SCDA"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 1


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "c", {"x": np.zeros((5, 5), np.float32)})
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-3])
    with pytest.raises(ParseError) as e:
        load_checkpoint(tmp_path / "t")
    assert "offset" in str(e.value)
    (tmp_path / "m").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "m")
