"""Implicit feature network: multi-scale 3D CNN encoder, per-level feature query, MLP decoder.

Features are never upsampled into one dense volume.  Each level is sampled
at the query points directly and the samples are concatenated, level 1
first; ``trilinear_query_lattice`` gives the dense-grid evaluation used for
prediction grids.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .grid import (VoxelGrid, cell_centers, trilinear_query_batch,
                   trilinear_query_batch_backward, trilinear_query_lattice, voxelize)
from .nn import (MLP, Conv3d, LayerSpec, bce, bce_backward, check_finite, maxpool3d_backward,
                 maxpool3d_forward, relu)

DEFAULT_CHANNELS = (4, 8, 8, 16, 16, 16)
DECODER_HIDDEN = 64


@dataclass
class EncoderConfig:
    channels: tuple = DEFAULT_CHANNELS
    resolution: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2 or min(self.channels) < 1:
            raise ConfigError("encoder needs >= 2 levels with >= 1 channel each")
        if self.resolution % 2 ** (self.levels - 1):
            raise ConfigError(f"resolution {self.resolution} is not divisible by "
                              f"2^{self.levels - 1} for {self.levels} levels")

    @property
    def levels(self):
        return len(self.channels)

    @property
    def d(self):
        return sum(self.channels)

    def level_resolutions(self):
        return [self.resolution // 2 ** i for i in range(self.levels)]

    def channel_layer_map(self):
        """Source level (1-based) of every concatenated channel."""
        return np.repeat(np.arange(1, self.levels + 1), self.channels)


@dataclass
class MultiScaleFeatures:
    grids: list  # level i: (B, c_i, R_i, R_i, R_i)
    channel_layer_map: np.ndarray = field(default=None)

    def __post_init__(self):
        widths = [g.shape[1] for g in self.grids]
        if self.channel_layer_map is None:
            self.channel_layer_map = np.repeat(np.arange(1, len(widths) + 1), widths)
        if len(self.channel_layer_map) != sum(widths):
            raise ConfigError("channel_layer_map does not match grid widths")

    @property
    def d(self):
        return len(self.channel_layer_map)

    @property
    def levels(self):
        return len(self.grids)

    def blocks(self):
        """(start, stop) of each level's channels in the concatenated vector."""
        edges = np.concatenate([[0], np.cumsum([g.shape[1] for g in self.grids])])
        return list(zip(edges[:-1], edges[1:]))


POOL = LayerSpec("maxpool3d", kernel=2, stride=2)


class Encoder:
    """Level 1: conv + ReLU on the input; level i > 1: max-pool, conv, ReLU."""

    def __init__(self, config: EncoderConfig, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        ins = (1,) + config.channels[:-1]
        self.convs = [Conv3d(a, b, 3, 1, 1, rng, dtype) for a, b in zip(ins, config.channels)]

    def parameters(self):
        out = {}
        for i, conv in enumerate(self.convs):
            out[f"conv{i + 1}.weight"] = conv.weight
            out[f"conv{i + 1}.bias"] = conv.bias
        return out

    def forward(self, x):
        """``x`` (B, 1, N, N, N) -> list of per-level grids and a backward cache."""
        if x.ndim != 5 or x.shape[1] != 1:
            raise ConfigError(f"encoder input must be (B, 1, N, N, N), got {x.shape}")
        if x.shape[2] != self.config.resolution:
            raise ConfigError(f"encoder expects resolution {self.config.resolution}, "
                              f"got {x.shape[2]}")
        x = x.astype(self.convs[0].weight.dtype, copy=False)
        levels, caches = [], []
        h = x
        for i, conv in enumerate(self.convs):
            pc = None
            if i > 0:
                h, pc = maxpool3d_forward(h, POOL)
            z, cc = conv.forward(h)
            h = relu(z)
            levels.append(h)
            caches.append((pc, cc))
        check_finite(levels[-1], "encoder output")
        return levels, caches

    def backward(self, dlevels, caches, levels):
        carry = None
        for i in reversed(range(len(self.convs))):
            d = dlevels[i] if carry is None else dlevels[i] + carry
            d = d * (levels[i] > 0)
            pc, cc = caches[i]
            dx = self.convs[i].backward(d, cc, need_input_grad=i > 0)
            carry = maxpool3d_backward(dx, pc, POOL) if i > 0 else None


def encode(encoder: Encoder, grid) -> MultiScaleFeatures:
    """Encode one voxel grid (or a batch (B, 1, N, N, N)) into multi-scale features."""
    x = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    if x.ndim == 3:
        x = x[None, None]
    levels, _ = encoder.forward(x)
    return MultiScaleFeatures(levels, encoder.config.channel_layer_map())


def query_features(feat: MultiScaleFeatures, points):
    """Concatenated per-level trilinear samples, (B, P, d); also returns a backward cache.

    ``points`` is (B, P, 3), or (P, 3) for a batch of one (then the result is (P, d)).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    outs, caches = [], []
    for g in feat.grids:
        o, c = trilinear_query_batch(g, pts)
        outs.append(o)
        caches.append(c)
    F = np.concatenate(outs, axis=-1)
    return (F[0] if single else F), (caches, feat.blocks())


def query_features_backward(dF, cache):
    caches, blocks = cache
    return [trilinear_query_batch_backward(dF[..., a:b], c) for c, (a, b) in zip(caches, blocks)]


def query_features_lattice(feat: MultiScaleFeatures, xs, ys, zs, batch=0):
    """Features on a coordinate lattice as a C-contiguous (len(xs)*len(ys)*len(zs), d) array."""
    out = np.empty((len(xs), len(ys), len(zs), feat.d), dtype=feat.grids[0].dtype)
    for g, (a, b) in zip(feat.grids, feat.blocks()):
        out[..., a:b] = trilinear_query_lattice(g[batch], xs, ys, zs)
    return out.reshape(-1, feat.d)


def make_decoder(d, hidden=DECODER_HIDDEN, rng=None, dtype=np.float32):
    return MLP([d, hidden, hidden, hidden, 1], ["relu", "relu", "relu", "sigmoid"], rng, dtype)


def decode(decoder: MLP, feature_vec):
    """Occupancy probability for each feature row."""
    fv = np.asarray(feature_vec)
    if fv.shape[-1] != decoder.widths[0]:
        raise ConfigError(f"decoder expects width {decoder.widths[0]}, got {fv.shape[-1]}")
    return decoder.predict(fv.astype(decoder.layers[0].weight.dtype, copy=False))[..., 0]


class IFNet:
    """Single-encoder reconstruction network."""

    def __init__(self, config: EncoderConfig | None = None, seed=0, dtype=np.float32,
                 hidden=DECODER_HIDDEN):
        self.config = config or EncoderConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.config, rng, dtype)
        self.decoder = make_decoder(self.config.d, hidden, rng, dtype)
        if self.decoder.widths[0] != self.config.d:
            raise ConfigError("decoder input width must equal encoder feature width")

    @property
    def resolution(self):
        return self.config.resolution

    def parameters(self):
        out = {f"g.{k}": v for k, v in self.encoder.parameters().items()}
        out.update({f"f.{k}": v for k, v in self.decoder.parameters().items()})
        return out

    def encode_features(self, x, domain="source"):
        levels, _ = self.encoder.forward(x)
        return MultiScaleFeatures(levels, self.config.channel_layer_map())

    def forward(self, x, points, domain="source"):
        levels, ecache = self.encoder.forward(x)
        feat = MultiScaleFeatures(levels, self.config.channel_layer_map())
        F, qcache = query_features(feat, points)
        out, dcache = self.decoder.forward(F.astype(levels[0].dtype, copy=False))
        return out[..., 0], (levels, ecache, qcache, dcache)

    def predict(self, x, points, domain="source"):
        """Probabilities only; nothing is cached for a backward pass."""
        feat = self.encode_features(x, domain)
        F, _ = query_features(feat, points)
        return self.decoder.predict(F.astype(feat.grids[0].dtype, copy=False))[..., 0]

    def backward(self, dprob, cache):
        levels, ecache, qcache, dcache = cache
        dF = self.decoder.backward(dprob[..., None], dcache)
        dlevels = query_features_backward(dF, qcache)
        self.encoder.backward(dlevels, ecache, levels)


def loss_if(model, x, points, labels, domain="source", backward=True):
    """Mean BCE between predicted occupancy and labels; gradients land in the model parameters."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("empty query batch")
    if labels.min() < 0 or labels.max() > 1:
        raise InputError("occupancy labels must be in [0, 1]")
    prob, cache = model.forward(x, points, domain)
    loss = bce(prob, labels)
    if backward:
        model.backward(bce_backward(prob, labels).astype(prob.dtype), cache)
    return loss


def predict_grid(model, scan, n_eval=128, domain="target", chunk=8) -> VoxelGrid:
    """Occupancy probabilities at all N_eval^3 cell centers, evaluated in x-slabs."""
    pts = scan.points if hasattr(scan, "points") else np.asarray(scan)
    x = voxelize(pts, model.resolution).values[None, None]
    feat = model.encode_features(x, domain)
    return predict_grid_from_features(model.decoder, feat, n_eval, chunk)


def predict_grid_from_features(decoder, feat, n_eval, chunk=8):
    coords = cell_centers(n_eval)
    out = np.empty((n_eval, n_eval, n_eval), dtype=np.float64)
    for s in range(0, n_eval, chunk):
        xs = coords[s:s + chunk]
        F = query_features_lattice(feat, xs, coords, coords)
        out[s:s + len(xs)] = decode(decoder, F).reshape(len(xs), n_eval, n_eval)
    return VoxelGrid(out, role="probability")
