"""Volume-consistent self-training.

Predictions on the more complete view A (teacher, no gradient) become hard
pseudo-labels for the less complete view B wherever the teacher is
confident.  Also provides the view-pair augmentation variants used for the
augmentation ablation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .mesh import PointCloud
from .nn import bce, bce_backward
from .scan import (PARTITION_K, VIEW_POINTS, ViewPair, downsample, draw_view_sizes,
                   kmeans_partition, make_view_pair)

AUGMENTATIONS = ("surface", "volume", "random", "random+surface", "random+volume",
                 "random+volume+surface")


@dataclass(frozen=True)
class ConfidenceBand:
    low: float = 0.1
    high: float = 0.9

    def __post_init__(self):
        if not 0 <= self.low < self.high <= 1:
            raise ConfigError(f"need 0 <= low < high <= 1, got ({self.low}, {self.high})")


@dataclass
class PseudoBatch:
    points: np.ndarray
    teacher: np.ndarray
    labels: np.ndarray
    mask: np.ndarray  # True = confident, enters the loss

    @property
    def masked_fraction(self):
        return float(self.mask.mean()) if self.mask.size else 0.0


@dataclass
class CTResult:
    loss: float
    masked_fraction: float
    n_masked: int


def sample_ct_queries(scan, n_uniform=512, n_near=512, sigma=0.05, seed=0):
    """Uniform points in the unit cube plus Gaussian perturbations of scan points."""
    pts = scan.points if hasattr(scan, "points") else np.asarray(scan, dtype=np.float64)
    if len(pts) == 0:
        raise InputError("cannot sample consistency queries around an empty scan")
    rng = np.random.default_rng(seed)
    uni = rng.uniform(-0.5, 0.5, size=(n_uniform, 3))
    near = pts[rng.integers(len(pts), size=n_near)] + rng.normal(0.0, 1.0, (n_near, 3)) * sigma
    return np.concatenate([uni, np.clip(near, -0.5, 0.5)])


def pseudo_label(teacher, band: ConfidenceBand = ConfidenceBand()):
    """Hard labels and confidence mask from teacher probabilities."""
    p = np.asarray(teacher)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise InputError("teacher probabilities must lie in [0, 1]")
    mask = (p <= band.low) | (p >= band.high)
    labels = (p >= band.high).astype(p.dtype)
    return labels, mask


def loss_ct(model, x_a, x_b, queries, band: ConfidenceBand = ConfidenceBand(), domain="target",
            backward=True, weight=1.0) -> CTResult:
    """Masked BCE of view-B predictions against view-A pseudo-labels.

    The teacher pass uses ``model.predict`` and never enters the backward
    pass, so parameters receive gradient only through the student.
    """
    teacher = model.predict(x_a, queries, domain)
    labels, mask = pseudo_label(teacher, band)
    n = int(mask.sum())
    if n == 0:
        return CTResult(0.0, 0.0, 0)
    prob, cache = model.forward(x_b, queries, domain)
    loss = weight * bce(prob[mask], labels[mask])
    if backward:
        d = np.zeros_like(prob)
        d[mask] = weight * bce_backward(prob[mask], labels[mask])
        model.backward(d.astype(prob.dtype), cache)
    return CTResult(float(loss), n / mask.size, n)


def total_loss(l_if=None, l_ct=None, ct_weight=1.0):
    """L_IF + weight * L_CT; either term may be missing, not both."""
    if l_if is None and l_ct is None:
        raise InputError("training step has neither a supervised nor a consistency term")
    return (0.0 if l_if is None else float(l_if)) + (0.0 if l_ct is None else ct_weight * float(l_ct))


def check_view_order(pair: ViewPair):
    """The teacher view must keep strictly more parts than the student view."""
    if pair.k_a <= pair.k_b:
        raise InputError(f"view A must be less corrupted than view B (K_A={pair.k_a}, K_B={pair.k_b})")
    return pair


def swap_views(pair: ViewPair) -> ViewPair:
    swapped = ViewPair(pair.view_b, pair.view_a, pair.k_b, pair.k_a, pair.keep_b, pair.keep_a,
                       pair.partition)
    return check_view_order(swapped)


# -- augmentation variants ---------------------------------------------------

def box_mask(points, center, count):
    """Axis-aligned cube around ``center`` covering the ``count`` L-inf nearest points.

    Returns (inside mask, half width).
    """
    d = np.abs(points - center).max(axis=1)
    if count <= 0:
        return np.zeros(len(points), dtype=bool), 0.0
    count = min(count, len(points))
    half = np.partition(d, count - 1)[count - 1]
    return d <= half, float(half)


def _unbiased_round(x, rng):
    lo = int(np.floor(x))
    return lo + int(rng.random() < x - lo)


def _drop_boxes(points, n_boxes, per_box, rng):
    """Drop ``n_boxes`` boxes of ``per_box`` points each (fractional sizes rounded at random)."""
    keep = np.ones(len(points), dtype=bool)
    boxes = []
    for _ in range(n_boxes):
        alive = np.nonzero(keep)[0]
        if len(alive) == 0:
            break
        center = points[alive[rng.integers(len(alive))]]
        inside, half = box_mask(points[alive], center, _unbiased_round(per_box, rng))
        keep[alive[inside]] = False
        boxes.append((center, half))
    return keep, boxes


def _split_units(n_units, parts, rng):
    """Assign each dropped unit to one active strategy, uniformly at random."""
    counts = dict.fromkeys(parts, 0)
    for i in rng.integers(len(parts), size=n_units):
        counts[parts[i]] += 1
    return counts


def augmentation_variant(scan, kind="surface", seed=0, K=PARTITION_K, n_points=VIEW_POINTS) -> ViewPair:
    """View pair built with the given dropping strategy (or a '+'-joined combination).

    Each view drops K - K_X units of n/K points in expectation, so all kinds
    remove the same expected number of points.  In combinations every unit is
    assigned to one of the strategies at random.
    """
    if kind not in AUGMENTATIONS:
        raise ConfigError(f"unknown augmentation {kind!r}; choose from {AUGMENTATIONS}")
    if kind == "surface":
        return make_view_pair(scan, seed, K, n_points)
    pts = scan.points if hasattr(scan, "points") else np.asarray(scan, dtype=np.float64)
    if len(pts) < K:
        raise InputError(f"scan needs at least {K} points for view generation")
    rng = np.random.default_rng(seed)
    parts = kind.split("+")
    part = kmeans_partition(pts, K, seed=rng.integers(2 ** 63)) if "surface" in parts else None
    ka, kb = draw_view_sizes(rng)
    unit = len(pts) / K
    views, keeps = [], []
    for kx in (ka, kb):
        counts = _split_units(K - kx, parts, rng)
        keep = np.ones(len(pts), dtype=bool)
        kept_clusters = np.arange(K)
        if counts.get("surface"):
            kept_clusters = np.sort(rng.choice(K, size=K - counts["surface"], replace=False))
            keep &= np.isin(part.assignment, kept_clusters)
        if counts.get("volume"):
            sub = np.nonzero(keep)[0]
            k2, _ = _drop_boxes(pts[sub], counts["volume"], unit, rng)
            keep[sub[~k2]] = False
        if counts.get("random"):
            sub = np.nonzero(keep)[0]
            n_drop = min(_unbiased_round(counts["random"] * unit, rng), len(sub))
            keep[sub[rng.choice(len(sub), size=n_drop, replace=False)]] = False
        if not keep.any():  # never hand back an empty view
            keep[rng.integers(len(pts))] = True
        v = pts[keep]
        idx = downsample(v, n_points, rng)
        cluster = part.assignment[keep][idx] if part is not None else None
        views.append(PointCloud(v[idx], cluster))
        keeps.append(kept_clusters)
    return ViewPair(views[0], views[1], ka, kb, keeps[0], keeps[1], part)
