"""Cross-domain feature fusion: two encoders, one shared decoder.

Target features are a channel-wise convex blend of source-encoder and
target-encoder features.  The blend weight starts from a depth prior (deeper
levels lean on the source encoder) and, in adaptive mode, gets a bounded
correction from a small MLP looking at pooled feature agreement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ifnet import (DECODER_HIDDEN, Encoder, EncoderConfig, MultiScaleFeatures, make_decoder,
                    query_features, query_features_backward)
from .nn import MLP, check_finite

MODES = ("adaptive", "non-adaptive", "contradictory", "source-only", "target-only")
POOLINGS = ("average", "max")
DEFAULT_ALPHA = 0.2


@dataclass
class FusionConfig:
    mode: str = "adaptive"
    alpha: float = DEFAULT_ALPHA
    pooling: str = "average"
    hidden: int | None = None  # h hidden width, None = d

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; choose from {MODES}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}; choose from {POOLINGS}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")

    @property
    def uses_h(self):
        return self.mode in ("adaptive", "contradictory")


@dataclass
class FusionWeights:
    w: np.ndarray  # (B, d) or (d,)
    w0: np.ndarray  # (d,)
    alpha: float = DEFAULT_ALPHA


def prior_weights(channel_layer_map, L=None, mode="adaptive"):
    """Per-channel prior weight on the source features."""
    lmap = np.asarray(channel_layer_map, dtype=np.int64)
    L = int(lmap.max()) if L is None else int(L)
    if lmap.size == 0 or lmap.min() < 1 or lmap.max() > L:
        raise ConfigError(f"channel layer map must take values in 1..{L}")
    if mode == "contradictory":
        return 1.0 - lmap / (L + 1)
    if mode == "non-adaptive":
        return (lmap > L // 2).astype(np.float64)
    if mode == "source-only":
        return np.ones(len(lmap))
    if mode == "target-only":
        return np.zeros(len(lmap))
    if mode == "adaptive":
        return lmap / (L + 1)
    raise ConfigError(f"unknown fusion mode {mode!r}")


def _check_pair(fs: MultiScaleFeatures, ft: MultiScaleFeatures):
    if len(fs.grids) != len(ft.grids) or any(a.shape != b.shape for a, b in zip(fs.grids, ft.grids)):
        raise ConfigError("source and target features come from different encoder configs")


def _pool(prod, pooling):
    flat = prod.reshape(prod.shape[0], prod.shape[1], -1)
    if pooling == "max":
        return flat.max(axis=-1)
    return flat.mean(axis=-1)


def pooled_interaction(fs: MultiScaleFeatures, ft: MultiScaleFeatures, pooling="average"):
    """Spatially pooled F_s * F_t per channel, levels concatenated: (B, d)."""
    _check_pair(fs, ft)
    return np.concatenate([_pool(a * b, pooling) for a, b in zip(fs.grids, ft.grids)], axis=1)


def _pooled_backward(dp, fs_grids, ft_grids, blocks, pooling):
    dfs, dft = [], []
    for a, b, (lo, hi) in zip(fs_grids, ft_grids, blocks):
        B, C = a.shape[:2]
        g = dp[:, lo:hi]
        if pooling == "max":
            prod = (a * b).reshape(B, C, -1)
            sel = np.zeros_like(prod)
            idx = prod.argmax(axis=-1)
            np.put_along_axis(sel, idx[..., None], g[..., None], axis=-1)
            d = sel.reshape(a.shape)
        else:
            n = np.prod(a.shape[2:])
            d = np.broadcast_to((g / n).reshape(B, C, 1, 1, 1), a.shape)
        dfs.append(d * b)
        dft.append(d * a)
    return dfs, dft


def make_h(d, hidden=None, rng=None, dtype=np.float32):
    hidden = d if hidden is None else hidden
    return MLP([d, hidden, d], ["relu", "sigmoid"], rng, dtype)


def adaptive_weights(fs, ft, w0, alpha=DEFAULT_ALPHA, h: MLP | None = None, pooling="average",
                     return_cache=False):
    """w = clip(alpha * h(pooled F_s * F_t) + w0, 0, 1), one row per batch element."""
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    w0 = np.asarray(w0)
    p = pooled_interaction(fs, ft, pooling)
    if h is None or alpha == 0:
        raw = np.broadcast_to(w0, p.shape).astype(p.dtype)
        hc = None
    else:
        hv, hc = h.forward(p)
        raw = alpha * hv + w0
    w = np.clip(raw, 0.0, 1.0).astype(p.dtype)
    fw = FusionWeights(w, w0, alpha)
    if return_cache:
        return fw, (raw, hc)
    return fw


def _weights_view(w, grids, blocks):
    w = np.asarray(w)
    if w.ndim == 1:
        w = np.broadcast_to(w, (grids[0].shape[0], len(w)))
    return [w[:, a:b].reshape(w.shape[0], b - a, 1, 1, 1).astype(g.dtype)
            for g, (a, b) in zip(grids, blocks)]


def fuse(fs: MultiScaleFeatures, ft: MultiScaleFeatures, w) -> MultiScaleFeatures:
    """Channel j of every level becomes w_j * F_s + (1 - w_j) * F_t."""
    _check_pair(fs, ft)
    w = w.w if isinstance(w, FusionWeights) else w
    if np.shape(w)[-1] != fs.d:
        raise ConfigError(f"weight length {np.shape(w)[-1]} != feature width {fs.d}")
    ws = _weights_view(w, fs.grids, fs.blocks())
    grids = [wj * a + (1 - wj) * b for wj, a, b in zip(ws, fs.grids, ft.grids)]
    return MultiScaleFeatures(grids, fs.channel_layer_map)


class DomainAdaptiveIFNet:
    """Source encoder ``g_s``, target encoder ``g_t``, weight MLP ``h`` and shared decoder ``f``.

    Source samples are decoded from ``g_s`` features alone; target samples go
    through fusion according to ``fusion.mode``.
    """

    def __init__(self, config: EncoderConfig | None = None, fusion: FusionConfig | None = None,
                 seed=0, dtype=np.float32, hidden=DECODER_HIDDEN):
        self.config = config or EncoderConfig()
        self.fusion = fusion or FusionConfig()
        rng = np.random.default_rng(seed)
        self.encoder_s = Encoder(self.config, rng, dtype)
        self.decoder = make_decoder(self.config.d, hidden, rng, dtype)
        self.encoder_t = Encoder(self.config, rng, dtype)
        self.h = make_h(self.config.d, self.fusion.hidden, rng, dtype)
        self.w0 = prior_weights(self.config.channel_layer_map(), self.config.levels,
                                self.fusion.mode)

    @property
    def resolution(self):
        return self.config.resolution

    @property
    def mode(self):
        return self.fusion.mode

    def parameters(self):
        out = {f"g_s.{k}": v for k, v in self.encoder_s.parameters().items()}
        out.update({f"g_t.{k}": v for k, v in self.encoder_t.parameters().items()})
        out.update({f"h.{k}": v for k, v in self.h.parameters().items()})
        out.update({f"f.{k}": v for k, v in self.decoder.parameters().items()})
        return out

    def init_target_from_source(self):
        src = self.encoder_s.parameters()
        for k, p in self.encoder_t.parameters().items():
            p.data = src[k].data.copy()

    def _check_domain(self, domain):
        if domain not in ("source", "target"):
            raise ConfigError(f"domain must be 'source' or 'target', got {domain!r}")
        if domain == "source" and self.mode == "target-only":
            raise ConfigError("target-only mode has no source path")

    def _features(self, x, domain):
        """Features for ``domain`` plus everything the backward pass needs."""
        self._check_domain(domain)
        cmap = self.config.channel_layer_map()
        if domain == "source" or self.mode == "source-only":
            ls, cs = self.encoder_s.forward(x)
            return MultiScaleFeatures(ls, cmap), ("s", ls, cs)
        if self.mode == "target-only":
            lt, ct = self.encoder_t.forward(x)
            return MultiScaleFeatures(lt, cmap), ("t", lt, ct)
        ls, cs = self.encoder_s.forward(x)
        lt, ct = self.encoder_t.forward(x)
        fs, ft = MultiScaleFeatures(ls, cmap), MultiScaleFeatures(lt, cmap)
        h = self.h if self.fusion.uses_h else None
        fw, (raw, hc) = adaptive_weights(fs, ft, self.w0, self.fusion.alpha, h,
                                         self.fusion.pooling, return_cache=True)
        fused = fuse(fs, ft, fw)
        check_finite(fw.w, "fusion weights")
        return fused, ("st", ls, cs, lt, ct, fw.w, raw, hc)

    def encode_features(self, x, domain="target") -> MultiScaleFeatures:
        return self._features(x, domain)[0]

    def fusion_weights(self, x):
        """Per-sample fusion weights for a target batch (B, d)."""
        feat, cache = self._features(x, "target")
        if cache[0] == "st":
            return cache[5]
        return np.broadcast_to(self.w0, (x.shape[0], self.config.d)).copy()

    def forward(self, x, points, domain="target"):
        feat, fcache = self._features(x, domain)
        F, qcache = query_features(feat, points)
        out, dcache = self.decoder.forward(F.astype(feat.grids[0].dtype, copy=False))
        return out[..., 0], (feat, fcache, qcache, dcache)

    def predict(self, x, points, domain="target"):
        feat, _ = self._features(x, domain)
        F, _ = query_features(feat, points)
        return self.decoder.predict(F.astype(feat.grids[0].dtype, copy=False))[..., 0]

    def backward(self, dprob, cache):
        feat, fcache, qcache, dcache = cache
        dF = self.decoder.backward(dprob[..., None], dcache)
        dlevels = query_features_backward(dF, qcache)
        kind = fcache[0]
        if kind == "s":
            self.encoder_s.backward(dlevels, fcache[2], fcache[1])
            return
        if kind == "t":
            self.encoder_t.backward(dlevels, fcache[2], fcache[1])
            return
        _, ls, cs, lt, ct, w, raw, hc = fcache
        blocks = feat.blocks()
        ws = _weights_view(w, ls, blocks)
        dls = [wj * d for wj, d in zip(ws, dlevels)]
        dlt = [(1 - wj) * d for wj, d in zip(ws, dlevels)]
        if hc is not None:
            B = w.shape[0]
            dw = np.concatenate([(d * (a - b)).reshape(B, d.shape[1], -1).sum(axis=-1)
                                 for d, a, b in zip(dlevels, ls, lt)], axis=1)
            dw = dw * ((raw > 0) & (raw < 1))  # clip passes gradient only inside (0, 1)
            dp = self.h.backward(self.fusion.alpha * dw, hc)
            gs, gt = _pooled_backward(dp, ls, lt, blocks, self.fusion.pooling)
            dls = [a + b for a, b in zip(dls, gs)]
            dlt = [a + b for a, b in zip(dlt, gt)]
        self.encoder_s.backward(dls, cs, ls)
        self.encoder_t.backward(dlt, ct, lt)
