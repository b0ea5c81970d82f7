"""Small deterministic tensor engine with hand-written backward passes.

Only the layer kinds the reconstruction networks need are provided:
3D convolution, non-overlapping 3D max pooling, fully connected layers,
ReLU / sigmoid, binary cross-entropy and Adam.  Layers follow a functional
convention: ``forward`` returns ``(output, cache)`` and ``backward(dout,
cache)`` returns the input gradient while accumulating parameter gradients
into ``Tensor.grad``.  Nothing is cached on the layer objects, so the same
network can be evaluated several times (teacher / student passes) before
any backward pass runs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, NumericError, ParseError

BCE_EPS = 1e-7


def check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    """A named parameter array with an optional gradient of the same shape."""

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        if grad is not None and np.shape(grad) != self.data.shape:
            raise ConfigError(f"grad shape {np.shape(grad)} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv3d | maxpool3d | fc | activation
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    activation: str = "none"  # relu | sigmoid | none

    def __post_init__(self):
        if self.kind not in ("conv3d", "maxpool3d", "fc", "activation"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "sigmoid", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def output_extent(self, extent):
        if self.kind not in ("conv3d", "maxpool3d"):
            return extent
        out = (extent + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ConfigError(
                f"{self.kind}: extent {extent} too small for kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}")
        return out


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- activations -------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    return x


def activation_backward(dy, y, kind):
    """Gradient through an activation given its *output* ``y``."""
    if kind == "relu":
        return dy * (y > 0)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    return dy


# -- convolution -------------------------------------------------------------

def _im2col(x, k, stride, padding):
    B, C, D, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    Do, Ho, Wo = win.shape[2:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * Do * Ho * Wo, C * k ** 3)
    return cols, (Do, Ho, Wo)


def conv3d_forward(x, spec: LayerSpec, weight, bias):
    """Cross-correlation of ``x`` (B, C_in, D, H, W) with ``weight`` (C_out, C_in, k, k, k).

    A 4-d input (C_in, D, H, W) is treated as a batch of one.
    """
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    if x.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ConfigError(f"conv3d expects (B, {spec.in_channels}, D, H, W), got {x.shape}")
    k = spec.kernel
    if weight.shape != (spec.out_channels, spec.in_channels, k, k, k):
        raise ConfigError(f"conv3d weight shape {weight.shape} does not match {spec}")
    for e in x.shape[2:]:
        spec.output_extent(e)
    cols, (Do, Ho, Wo) = _im2col(x, k, spec.stride, spec.padding)
    wmat = weight.reshape(spec.out_channels, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += bias
    y = y.reshape(x.shape[0], Do, Ho, Wo, spec.out_channels).transpose(0, 4, 1, 2, 3)
    y = np.ascontiguousarray(y)
    cache = (cols, x.shape, (Do, Ho, Wo))
    return (y[0] if squeeze else y), cache


def conv3d_backward(dy, cache, spec: LayerSpec, weight, need_input_grad=True):
    """Returns ``(dx, dweight, dbias)``; ``dx`` is None when not requested."""
    cols, xshape, (Do, Ho, Wo) = cache
    squeeze = dy.ndim == 4
    if squeeze:
        dy = dy[None]
    B, C = xshape[0], xshape[1]
    k, s, p = spec.kernel, spec.stride, spec.padding
    dyf = dy.transpose(0, 2, 3, 4, 1).reshape(-1, spec.out_channels)
    dw = (dyf.T @ cols).reshape(weight.shape)
    db = dyf.sum(axis=0)
    dx = None
    if need_input_grad:
        dcols = (dyf @ weight.reshape(spec.out_channels, -1)).reshape(B, Do, Ho, Wo, C, k, k, k)
        dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
        D, H, W = xshape[2:]
        dxp = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p), dtype=dy.dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    dxp[:, :, a:a + s * Do:s, b:b + s * Ho:s, c:c + s * Wo:s] += dcols[..., a, b, c]
        dx = dxp[:, :, p:p + D, p:p + H, p:p + W]
        if squeeze:
            dx = dx[0]
    return dx, dw, db


class Conv3d:
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=1,
                 rng=None, dtype=np.float32):
        self.spec = LayerSpec("conv3d", kernel, stride, padding, in_channels, out_channels)
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_channels * kernel ** 3
        self.weight = Tensor(uniform_init(rng, (out_channels, in_channels, kernel, kernel, kernel),
                                          fan_in, dtype))
        self.bias = Tensor(uniform_init(rng, (out_channels,), fan_in, dtype))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return conv3d_forward(x, self.spec, self.weight.data, self.bias.data)

    def backward(self, dy, cache, need_input_grad=True):
        dx, dw, db = conv3d_backward(dy, cache, self.spec, self.weight.data, need_input_grad)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


# -- pooling -----------------------------------------------------------------

def maxpool3d_forward(x, spec: LayerSpec):
    """Non-overlapping max pooling (kernel == stride).  Ties go to the first element."""
    if spec.kernel != spec.stride or spec.padding:
        raise ConfigError("only non-overlapping, unpadded max pooling is supported")
    k = spec.kernel
    B, C, D, H, W = x.shape
    Do, Ho, Wo = (spec.output_extent(e) for e in (D, H, W))
    xc = x[:, :, :Do * k, :Ho * k, :Wo * k]
    r = xc.reshape(B, C, Do, k, Ho, k, Wo, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    r = r.reshape(B, C, Do, Ho, Wo, k ** 3)
    idx = r.argmax(axis=-1)
    y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool3d_backward(dy, cache, spec: LayerSpec):
    idx, xshape = cache
    k = spec.kernel
    B, C, D, H, W = xshape
    Do, Ho, Wo = dy.shape[2:]
    r = np.zeros((B, C, Do, Ho, Wo, k ** 3), dtype=dy.dtype)
    np.put_along_axis(r, idx[..., None], dy[..., None], axis=-1)
    r = r.reshape(B, C, Do, Ho, Wo, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros(xshape, dtype=dy.dtype)
    dx[:, :, :Do * k, :Ho * k, :Wo * k] = r.reshape(B, C, Do * k, Ho * k, Wo * k)
    return dx


# -- fully connected ---------------------------------------------------------

def _matmul(x, w):
    # a 1-row product goes through gemv, whose rounding differs from gemm;
    # duplicating the row keeps single-point evaluation bit-identical to batches
    if x.shape[0] == 1:
        return (np.concatenate([x, x]) @ w)[:1]
    return x @ w


class Linear:
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(uniform_init(rng, (in_features, out_features), in_features, dtype))
        self.bias = Tensor(uniform_init(rng, (out_features,), in_features, dtype))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ConfigError(f"linear layer expects width {self.in_features}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.in_features)
        y = _matmul(x2, self.weight.data) + self.bias.data
        return y.reshape(lead + (self.out_features,)), x2

    def backward(self, dy, cache):
        x2 = cache
        dy2 = dy.reshape(-1, self.out_features)
        self.weight.accumulate(x2.T @ dy2)
        self.bias.accumulate(dy2.sum(axis=0))
        dx = _matmul(dy2, self.weight.data.T)
        return dx.reshape(dy.shape[:-1] + (self.in_features,))


class MLP:
    """Chain of fully connected layers with one activation kind per layer."""

    def __init__(self, widths, activations, rng=None, dtype=np.float32):
        if len(activations) != len(widths) - 1:
            raise ConfigError("need one activation per layer")
        rng = np.random.default_rng(0) if rng is None else rng
        self.widths = list(widths)
        self.activations = list(activations)
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def specs(self):
        return [LayerSpec("fc", in_channels=l.in_features, out_channels=l.out_features,
                          activation=act) for l, act in zip(self.layers, self.activations)]

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"fc{i + 1}.{k}"] = v
        return out

    def forward(self, x):
        caches = []
        for layer, act in zip(self.layers, self.activations):
            z, c = layer.forward(x)
            x = activation_forward(z, act)
            caches.append((c, x))
        check_finite(x, "mlp output")
        return x, caches

    def predict(self, x):
        """Forward pass without caches; activations are applied in place."""
        lead = x.shape[:-1]
        h = x.reshape(-1, x.shape[-1])
        for layer, act in zip(self.layers, self.activations):
            h = _matmul(h, layer.weight.data)
            h += layer.bias.data
            if act == "relu":
                np.maximum(h, 0, out=h)
            elif act == "sigmoid":
                h = sigmoid(h)
        check_finite(h, "mlp output")
        return h.reshape(lead + (h.shape[-1],))

    def backward(self, dy, caches):
        for layer, act, (c, y) in zip(reversed(self.layers), reversed(self.activations),
                                      reversed(caches)):
            dy = layer.backward(activation_backward(dy, y, act), c)
        check_finite(dy, "mlp input gradient")
        return dy


def mlp_forward(x, layers):
    """Evaluate ``layers`` -- a list of ``(LayerSpec, weight, bias)`` -- on ``x``.

    Weights are stored (in, out).  Stateless; used as a reference path.
    """
    x = np.asarray(x)
    for spec, w, b in layers:
        if spec.kind != "fc":
            raise ConfigError("mlp_forward only takes fully connected layers")
        if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise ConfigError(f"dimension mismatch: input {x.shape[-1]} vs weight {w.shape}")
        lead = x.shape[:-1]
        x = _matmul(x.reshape(-1, w.shape[0]), w).reshape(lead + (w.shape[1],)) + b
        x = activation_forward(x, spec.activation)
    return x


# -- loss --------------------------------------------------------------------

def bce(pred, target, eps=BCE_EPS):
    """Mean binary cross-entropy of probabilities ``pred`` against ``target``."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.size and (target.min() < 0 or target.max() > 1):
        raise InputError("BCE targets must lie in [0, 1]")
    p = np.clip(pred, eps, 1 - eps)
    per = -(target * np.log(p) + (1 - target) * np.log1p(-p))
    return float(np.mean(per)) if per.size else 0.0


def bce_backward(pred, target, eps=BCE_EPS):
    """d(mean BCE)/d(pred), using the clamped probability."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    p = np.clip(pred, eps, 1 - eps)
    return (p - target) / (p * (1 - p)) / max(pred.size, 1)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr_scale=None):
    """One bias-corrected Adam update on every parameter that carries a gradient."""
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape mismatch for {name}")
        check_finite(g, f"gradient of {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        lr = state.lr * (1.0 if lr_scale is None else lr_scale.get(name, 1.0))
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return params


# -- verification ------------------------------------------------------------

def grad_check(loss_and_grad: Callable[[], float], params: Mapping[str, Tensor], h=1e-5,
               max_entries=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad`` must zero/refill the ``grad`` of every tensor in
    ``params`` and return the scalar loss.  Parameters should be float64.
    With ``max_entries`` only a seeded random subset of entries is probed.
    """
    for p in params.values():
        p.grad = None
    loss_and_grad()
    analytic = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        check_finite(g, f"gradient of {name}")
        analytic[name] = g

    entries = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(0) if rng is None else rng
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in entries:
        flat = params[name].data.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up = loss_and_grad()
        flat[i] = old - h
        down = loss_and_grad()
        flat[i] = old
        fd = (up - down) / (2 * h)
        ga = analytic[name].reshape(-1)[i]
        rel = abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
        worst = max(worst, rel)
    for p in params.values():
        p.grad = None
    return worst


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"SCDA"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]):
    """Write named arrays as little-endian float32 in insertion order."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError("truncated checkpoint", offset=pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", offset=0)
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        start = pos
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", offset=start) from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        out[name] = arr
    if pos != len(buf):
        raise ParseError("trailing bytes after last tensor", offset=pos)
    return out


def parameters_with_prefix(prefix: str, params: Mapping[str, Tensor]):
    return {f"{prefix}.{k}": v for k, v in params.items()}


def iter_named(modules: Iterable[tuple]):
    out = {}
    for prefix, mod in modules:
        out.update(parameters_with_prefix(prefix, mod.parameters()))
    return out
