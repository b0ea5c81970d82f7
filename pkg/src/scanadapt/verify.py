"""Finite-difference gradient checks for every layer kind and the full networks.

All checks run in float64.  Inputs are standard normal and parameters are
scaled up from their default initialisation so that gradients sit well above
the roundoff floor of the central differences (about 1e-11 absolute here).
"""
from __future__ import annotations

import time

import numpy as np

from .cdff import DomainAdaptiveIFNet, FusionConfig
from .grid import trilinear_query_batch, trilinear_query_batch_backward
from .ifnet import EncoderConfig, IFNet
from .nn import (MLP, Conv3d, LayerSpec, Linear, Tensor, activation_backward, activation_forward,
                 bce, bce_backward, grad_check, maxpool3d_backward, maxpool3d_forward)

TOLERANCE = 1e-4
SMALL = EncoderConfig((2, 3, 3), 8)
PARAM_SCALE = 2.0


def _readout(rng, shape):
    return rng.normal(size=shape)


def check_conv(seed=0, stride=1, padding=1):
    rng = np.random.default_rng(seed)
    conv = Conv3d(2, 3, 3, stride, padding, rng, np.float64)
    x = Tensor(rng.normal(size=(2, 2, 5, 5, 5)))
    y0, _ = conv.forward(x.data)
    R = _readout(rng, y0.shape)
    params = {"w": conv.weight, "b": conv.bias, "x": x}

    def f():
        for p in params.values():
            p.grad = None
        y, c = conv.forward(x.data)
        x.accumulate(conv.backward(R, c))
        return float((y * R).sum())
    return grad_check(f, params)


def check_maxpool(seed=0):
    rng = np.random.default_rng(seed)
    spec = LayerSpec("maxpool3d", kernel=2, stride=2)
    # distinct values keep every window's maximum unique under the probe
    x = Tensor(rng.permutation(2 * 2 * 4 ** 3).reshape(2, 2, 4, 4, 4) * 0.1)
    R = _readout(rng, (2, 2, 2, 2, 2))

    def f():
        x.grad = None
        y, c = maxpool3d_forward(x.data, spec)
        x.accumulate(maxpool3d_backward(R, c, spec))
        return float((y * R).sum())
    return grad_check(f, {"x": x})


def check_linear(seed=0):
    rng = np.random.default_rng(seed)
    lin = Linear(5, 4, rng, np.float64)
    x = Tensor(rng.normal(size=(7, 5)))
    R = _readout(rng, (7, 4))
    params = {"w": lin.weight, "b": lin.bias, "x": x}

    def f():
        for p in params.values():
            p.grad = None
        y, c = lin.forward(x.data)
        x.accumulate(lin.backward(R, c))
        return float((y * R).sum())
    return grad_check(f, params)


def check_activation(kind, seed=0):
    rng = np.random.default_rng(seed)
    # keep ReLU inputs away from the kink
    v = rng.normal(size=(6, 5))
    x = Tensor(np.where(np.abs(v) < 0.05, 0.5, v))
    R = _readout(rng, x.shape)

    def f():
        x.grad = None
        y = activation_forward(x.data, kind)
        x.accumulate(activation_backward(R, y, kind))
        return float((y * R).sum())
    return grad_check(f, {"x": x})


def check_bce(seed=0):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.uniform(0.05, 0.95, size=(4, 9)))
    t = rng.uniform(0, 1, size=(4, 9))

    def f():
        p.grad = None
        p.accumulate(bce_backward(p.data, t))
        return bce(p.data, t)
    return grad_check(f, {"p": p})


def check_trilinear(seed=0):
    rng = np.random.default_rng(seed)
    g = Tensor(rng.normal(size=(2, 3, 4, 4, 4)))
    pts = rng.uniform(-0.6, 0.6, size=(2, 11, 3))
    R = _readout(rng, (2, 11, 3))

    def f():
        g.grad = None
        out, c = trilinear_query_batch(g.data, pts)
        g.accumulate(trilinear_query_batch_backward(R, c))
        return float((out * R).sum())
    return grad_check(f, {"g": g})


def check_mlp(seed=0):
    rng = np.random.default_rng(seed)
    mlp = MLP([5, 6, 6, 1], ["relu", "relu", "sigmoid"], rng, np.float64)
    params = mlp.parameters()
    for p in params.values():
        p.data *= PARAM_SCALE
    x = rng.normal(size=(9, 5))
    t = (rng.random((9, 1)) < 0.5).astype(float)

    def f():
        for p in params.values():
            p.grad = None
        y, c = mlp.forward(x)
        mlp.backward(bce_backward(y, t), c)
        return bce(y, t)
    return grad_check(f, params)


def _scaled(model):
    params = model.parameters()
    for p in params.values():
        p.data *= PARAM_SCALE
    return params


def _task(seed, batch=2, points=20):
    rng = np.random.default_rng(seed + 1000)
    x = rng.normal(size=(batch, 1, SMALL.resolution, SMALL.resolution, SMALL.resolution))
    pts = rng.uniform(-0.5, 0.5, size=(batch, points, 3))
    lab = (rng.random((batch, points)) < 0.5).astype(float)
    return x, pts, lab


def check_ifnet(seed=0):
    model = IFNet(SMALL, seed=seed, dtype=np.float64, hidden=8)
    params = _scaled(model)
    x, pts, lab = _task(seed)

    def f():
        for p in params.values():
            p.grad = None
        prob, c = model.forward(x, pts)
        model.backward(bce_backward(prob, lab), c)
        return bce(prob, lab)
    return grad_check(f, params)


def check_fused(seed=0, mode="adaptive", alpha=0.5):
    """The target path through g_s, g_t, h and f."""
    model = DomainAdaptiveIFNet(SMALL, FusionConfig(mode, alpha=alpha), seed=seed,
                                dtype=np.float64, hidden=8)
    params = _scaled(model)
    x, pts, lab = _task(seed)

    def f():
        for p in params.values():
            p.grad = None
        prob, c = model.forward(x, pts, "target")
        model.backward(bce_backward(prob, lab), c)
        return bce(prob, lab)
    return grad_check(f, params)


CHECKS = {
    "conv3d": check_conv,
    "conv3d_stride2": lambda seed=0: check_conv(seed, stride=2, padding=0),
    "maxpool3d": check_maxpool,
    "fc": check_linear,
    "relu": lambda seed=0: check_activation("relu", seed),
    "sigmoid": lambda seed=0: check_activation("sigmoid", seed),
    "bce": check_bce,
    "trilinear": check_trilinear,
    "mlp": check_mlp,
    "ifnet": check_ifnet,
    "cdff_fused": check_fused,
}


def run_all(seed=0):
    """Yields (name, max relative error, seconds) per check."""
    for name, fn in CHECKS.items():
        t = time.perf_counter()
        err = fn(seed=seed)
        yield name, err, time.perf_counter() - t
