"""Scan simulation, k-means partitioning and cluster-dropping view pairs."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, InputError
from .mesh import PointCloud, TriMesh

PARTITION_K = 8
VIEW_POINTS = 1000
KA_CHOICES = (7, 8)
KB_CHOICES = (5, 6, 7)


@dataclass
class ScanParams:
    keep_ratio: float = 0.13
    noise_sigma: float = 0.004
    noise_max: float = 0.01
    cull: bool = True
    view_dir: tuple | None = (-0.3, -0.5, -0.8)  # None draws a random direction per scan
    pixels: int = 64
    depth_tol: float | None = None  # defaults to 2 / pixels
    drop_clusters: tuple | None = (1, 4)  # inclusive range of clusters to drop, None = no drop
    dense_points: int = 10000

    def __post_init__(self):
        if not 0 < self.keep_ratio <= 1:
            raise InputError("keep_ratio must be in (0, 1]")
        if self.noise_sigma < 0 or self.noise_max < 0:
            raise InputError("noise parameters must be non-negative")
        if self.drop_clusters is not None:
            lo, hi = self.drop_clusters
            if not 0 <= lo <= hi < PARTITION_K:
                raise InputError(f"drop range must satisfy 0 <= lo <= hi < {PARTITION_K}")
            self.drop_clusters = (int(lo), int(hi))
        if self.view_dir is not None:
            self.view_dir = tuple(float(x) for x in self.view_dir)

    def to_dict(self):
        return asdict(self)


def source_params():
    return ScanParams()


def target_params():
    """Harsher corruption used to manufacture the real-scan domain."""
    return ScanParams(keep_ratio=0.10, noise_sigma=0.01, noise_max=0.03, view_dir=None,
                      drop_clusters=(2, 4))


@dataclass
class Partition:
    K: int
    assignment: np.ndarray  # (P,)
    centroids: np.ndarray  # (K, 3)
    objective: list = field(default_factory=list)  # per-iteration sum of squared distances


@dataclass
class ViewPair:
    view_a: PointCloud
    view_b: PointCloud
    k_a: int
    k_b: int
    keep_a: np.ndarray
    keep_b: np.ndarray
    partition: Partition | None = None


def surface_sample(mesh: TriMesh, n, seed=0) -> PointCloud:
    """Area-weighted uniform samples on the surface."""
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    cdf = np.cumsum(areas)
    if len(cdf) == 0 or cdf[-1] <= 0:
        raise InputError("mesh has no area to sample")
    tri = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(cdf) - 1)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    c = mesh.corners()[tri]
    return PointCloud(np.einsum("nk,nkd->nd", w, c))


def _basis(d):
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return d, u, np.cross(d, u)


def occlusion_cull(points, view_dir, pixels=64, depth_tol=None):
    """Keep points within ``depth_tol`` of the nearest point in their pixel.

    Orthographic projection along ``view_dir``; depth grows along it.
    Returns a boolean keep mask.
    """
    depth_tol = 2.0 / pixels if depth_tol is None else depth_tol
    d, u, v = _basis(view_dir)
    half = np.sqrt(3) / 2
    pu = np.clip(((points @ u + half) / (2 * half) * pixels).astype(np.int64), 0, pixels - 1)
    pv = np.clip(((points @ v + half) / (2 * half) * pixels).astype(np.int64), 0, pixels - 1)
    pix = pu * pixels + pv
    depth = points @ d
    nearest = np.full(pixels * pixels, np.inf)
    np.minimum.at(nearest, pix, depth)
    return depth <= nearest[pix] + depth_tol


def random_direction(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def truncated_noise(rng, shape, sigma, bound):
    """Component-wise Gaussian noise, resampled until every |component| <= bound."""
    if sigma == 0 or bound == 0:
        return np.zeros(shape)
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def downsample(points, count, rng):
    """Exactly ``count`` points without replacement, original order kept."""
    if count >= len(points):
        return np.arange(len(points))
    return np.sort(rng.choice(len(points), size=count, replace=False))


def simulate_scan(mesh: TriMesh, params: ScanParams, seed=0) -> PointCloud:
    rng = np.random.default_rng(seed)
    pts = surface_sample(mesh, params.dense_points, seed=rng.integers(2 ** 63)).points
    if params.cull:
        view = params.view_dir if params.view_dir is not None else random_direction(rng)
        pts = pts[occlusion_cull(pts, view, params.pixels, params.depth_tol)]
    keep = int(round(params.keep_ratio * len(pts)))
    pts = pts[downsample(pts, keep, rng)]
    pts = pts + truncated_noise(rng, pts.shape, params.noise_sigma, params.noise_max)
    if params.drop_clusters is not None and len(pts) >= PARTITION_K:
        lo, hi = params.drop_clusters
        n_drop = int(rng.integers(lo, hi + 1))
        if n_drop:
            part = kmeans_partition(pts, PARTITION_K, seed=rng.integers(2 ** 63))
            kept = np.sort(rng.choice(PARTITION_K, size=PARTITION_K - n_drop, replace=False))
            pts = pts[np.isin(part.assignment, kept)]
    if len(pts) == 0:
        raise DataError("scan simulation produced an empty point cloud")
    return PointCloud(pts)


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def kmeans_partition(points, K, seed=0, max_iter=100) -> Partition:
    """Lloyd's algorithm with k-means++ seeding; empty clusters are re-seeded."""
    pts = points.points if hasattr(points, "points") else np.asarray(points, dtype=np.float64)
    n = len(pts)
    if K < 1 or n < K:
        raise InputError(f"need at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
            if d2[nxt] == 0:  # rounding landed on an already-covered point
                nxt = int(np.argmax(d2))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    centroids = pts[chosen].copy()

    assign = None
    history = []
    for _ in range(max_iter):
        dist = _sq_dists(pts, centroids)
        new = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            members = assign == k
            if members.any():
                centroids[k] = pts[members].mean(axis=0)
        counts = np.bincount(assign, minlength=K)
        for k in np.nonzero(counts == 0)[0]:
            # re-seed at the point farthest from its current centroid
            far = int(np.argmax(((pts - centroids[assign]) ** 2).sum(axis=1)))
            centroids[k] = pts[far]
            assign[far] = k
    return Partition(K, assign, centroids, history)


def drop_clusters(points, partition: Partition, keep_ids) -> PointCloud:
    pts = points.points if hasattr(points, "points") else np.asarray(points)
    keep_ids = np.asarray(list(keep_ids), dtype=np.int64)
    if keep_ids.size == 0:
        raise InputError("keep_ids must not be empty")
    mask = np.isin(partition.assignment, keep_ids)
    return PointCloud(pts[mask], partition.assignment[mask])


def draw_view_sizes(rng, ka_choices=KA_CHOICES, kb_choices=KB_CHOICES):
    while True:
        ka, kb = int(rng.choice(ka_choices)), int(rng.choice(kb_choices))
        if ka > kb:
            return ka, kb


def make_view_pair(scan, seed=0, K=PARTITION_K, n_points=VIEW_POINTS) -> ViewPair:
    """Two cluster-dropped views; view A keeps more clusters than view B."""
    pts = scan.points if hasattr(scan, "points") else np.asarray(scan, dtype=np.float64)
    if len(pts) < K:
        raise InputError(f"scan needs at least {K} points for view generation")
    rng = np.random.default_rng(seed)
    part = kmeans_partition(pts, K, seed=rng.integers(2 ** 63))
    ka, kb = draw_view_sizes(rng)
    keep_a = np.sort(rng.choice(K, size=ka, replace=False))
    keep_b = np.sort(rng.choice(K, size=kb, replace=False))
    views = []
    for keep in (keep_a, keep_b):
        v = drop_clusters(pts, part, keep)
        idx = downsample(v.points, n_points, rng)
        views.append(PointCloud(v.points[idx], v.cluster[idx]))
    return ViewPair(views[0], views[1], ka, kb, keep_a, keep_b, part)
