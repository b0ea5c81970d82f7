"""Inside/outside tests against closed triangle meshes by axis-aligned ray parity.

A ray is cast from the query towards +axis; the point is inside when the
number of crossed triangles is odd.  Three rays (x, y, z) vote.  Edge hits
are resolved with a top-left ownership rule so a ray through a shared edge
is counted once.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .grid import cell_centers
from .mesh import TriMesh, is_watertight

PAD = 0.05  # query points may sit this far outside the canonical cube

_OTHER = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


@dataclass
class QueryBatch:
    points: np.ndarray  # (P, 3)
    labels: np.ndarray  # (P,) occupancy in {0, 1} or soft values
    mask: np.ndarray | None = None  # (P,) bool, True = used
    single_ray: bool = False  # inside test fell back to one ray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels).reshape(-1)
        if len(self.labels) != len(self.points):
            raise InputError("points and labels must have equal length")
        if self.mask is not None and len(self.mask) != len(self.points):
            raise InputError("mask length must match points")
        if len(self.points) and np.abs(self.points).max() > 0.5 + PAD:
            raise InputError("query points must lie in the padded canonical cube")

    def __len__(self):
        return len(self.points)


def _projected(mesh, axis):
    """Per-triangle 2D corners (T, 3, 2) in the plane orthogonal to ``axis``, CCW, plus depths."""
    b, c = _OTHER[axis]
    tri = mesh.vertices[mesh.triangles]
    p2 = tri[:, :, [b, c]]
    depth = tri[:, :, axis]
    area2 = ((p2[:, 1, 0] - p2[:, 0, 0]) * (p2[:, 2, 1] - p2[:, 0, 1])
             - (p2[:, 1, 1] - p2[:, 0, 1]) * (p2[:, 2, 0] - p2[:, 0, 0]))
    keep = area2 != 0
    p2, depth, area2 = p2[keep], depth[keep], area2[keep]
    flip = area2 < 0
    p2[flip] = p2[flip][:, [0, 2, 1]]
    depth[flip] = depth[flip][:, [0, 2, 1]]
    return p2, depth, np.abs(area2)


def _owned(dx, dy):
    return (dy > 0) | ((dy == 0) & (dx < 0))


def _hits(p2, depth, area2, q):
    """Crossing coordinate along the ray axis for each (triangle, query) pair, NaN if missed.

    ``p2``/``depth``/``area2`` are per-pair (already broadcast), ``q`` is (M, 2).
    """
    lam = []
    inside = np.ones(len(q), dtype=bool)
    for k in range(3):
        a = p2[:, k]
        b = p2[:, (k + 1) % 3]
        dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
        e = dx * (q[:, 1] - a[:, 1]) - dy * (q[:, 0] - a[:, 0])
        inside &= (e > 0) | ((e == 0) & _owned(dx, dy))
        lam.append(e)
    # lam[k] is the weight of the vertex opposite edge k, i.e. vertex (k + 2) % 3
    z = (lam[0] * depth[:, 2] + lam[1] * depth[:, 0] + lam[2] * depth[:, 1]) / area2
    return np.where(inside, z, np.nan)


def _parity_along(mesh, points, axis, bins=None):
    """Odd-crossing flag per point for a ray towards +axis."""
    b, c = _OTHER[axis]
    p2, depth, area2 = _projected(mesh, axis)
    q = points[:, [b, c]]
    n_pts = len(points)
    result = np.zeros(n_pts, dtype=bool)
    if len(p2) == 0 or n_pts == 0:
        return result
    lo = p2.reshape(-1, 2).min(axis=0)
    hi = p2.reshape(-1, 2).max(axis=0)
    g = bins or int(np.clip(np.sqrt(len(p2) / 4), 1, 64))
    size = np.maximum((hi - lo) / g, 1e-12)

    def cell(v):
        return np.clip(np.floor((v - lo) / size).astype(np.int64), 0, g - 1)

    tlo, thi = cell(p2.min(axis=1)), cell(p2.max(axis=1))
    span = thi - tlo + 1
    count = span[:, 0] * span[:, 1]
    tri_ids = np.repeat(np.arange(len(p2)), count)
    offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    bx = tlo[tri_ids, 0] + offs % span[tri_ids, 0]
    by = tlo[tri_ids, 1] + offs // span[tri_ids, 0]
    tri_bin = bx * g + by
    order = np.argsort(tri_bin, kind="stable")
    tri_ids, tri_bin = tri_ids[order], tri_bin[order]
    starts = np.searchsorted(tri_bin, np.arange(g * g + 1))

    within = np.all((q >= lo) & (q <= hi), axis=1)
    pbin = cell(q)[:, 0] * g + cell(q)[:, 1]
    pbin = np.where(within, pbin, -1)
    porder = np.argsort(pbin, kind="stable")
    psorted = pbin[porder]
    for binid in np.unique(psorted[psorted >= 0]):
        sel = porder[np.searchsorted(psorted, binid):np.searchsorted(psorted, binid, side="right")]
        tris = tri_ids[starts[binid]:starts[binid + 1]]
        if len(tris) == 0:
            continue
        P, T = len(sel), len(tris)
        qq = np.repeat(q[sel], T, axis=0)
        ti = np.tile(tris, P)
        z = _hits(p2[ti], depth[ti], area2[ti], qq).reshape(P, T)
        crossings = (z > points[sel, axis][:, None]).sum(axis=1)
        result[sel] = crossings % 2 == 1
    return result


def points_inside(mesh: TriMesh, points, rays=3):
    """Boolean inside flag per point; majority over ``rays`` axis-aligned rays (1 or 3)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    votes = sum(_parity_along(mesh, points, a).astype(int) for a in range(rays))
    return votes * 2 > rays


def sample_occupancy(mesh: TriMesh, n_uniform, n_surface, sigma=0.05, seed=0) -> QueryBatch:
    """Uniform cube samples plus jittered surface samples, labelled by ray parity."""
    from .scan import surface_sample

    rng = np.random.default_rng(seed)
    uni = rng.uniform(-0.5, 0.5, size=(n_uniform, 3))
    surf = surface_sample(mesh, n_surface, seed=rng.integers(2 ** 63)).points
    surf = np.clip(surf + rng.normal(0.0, sigma, size=surf.shape), -0.5 - PAD, 0.5 + PAD)
    pts = np.concatenate([uni, surf])
    single = not is_watertight(mesh)
    if single:
        warnings.warn("mesh is not watertight; falling back to a single-ray inside test")
    labels = points_inside(mesh, pts, rays=1 if single else 3).astype(np.float32)
    return QueryBatch(pts, labels, single_ray=single)


def occupancy_grid(mesh: TriMesh, n, rays=3):
    """Inside flags at all N^3 cell centers, by column-wise ray parity (scanline)."""
    centers = cell_centers(n)
    votes = np.zeros((n, n, n), dtype=np.int8)
    for axis in range(rays):
        b, c = _OTHER[axis]
        p2, depth, area2 = _projected(mesh, axis)
        if len(p2) == 0:
            continue
        mn, mx = p2.min(axis=1), p2.max(axis=1)
        first = np.searchsorted(centers, mn, side="left")  # first column center >= min
        last = np.searchsorted(centers, mx, side="right") - 1
        span = np.maximum(last - first + 1, 0)
        count = span[:, 0] * span[:, 1]
        tri_ids = np.repeat(np.arange(len(p2)), count)
        offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        ci = first[tri_ids, 0] + offs % np.maximum(span[tri_ids, 0], 1)
        cj = first[tri_ids, 1] + offs // np.maximum(span[tri_ids, 0], 1)
        q = np.stack([centers[ci], centers[cj]], axis=1)
        z = _hits(p2[tri_ids], depth[tri_ids], area2[tri_ids], q)
        hit = ~np.isnan(z)
        ci, cj, z = ci[hit], cj[hit], z[hit]
        below = np.searchsorted(centers, z, side="left")  # nodes strictly below the hit
        diff = np.zeros((n, n, n + 1), dtype=np.int32)
        np.add.at(diff, (ci, cj, 0), 1)
        np.add.at(diff, (ci, cj, below), -1)
        parity = (np.cumsum(diff, axis=2)[:, :, :n] % 2).astype(np.int8)
        # parity is indexed (b, c, axis); move it back to (x, y, z)
        order = {0: (2, 0, 1), 1: (1, 2, 0), 2: (0, 1, 2)}[axis]
        votes += parity.transpose(order)
    return votes * 2 > rays
