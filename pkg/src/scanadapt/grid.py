"""Voxel grids over the canonical cube [-0.5, 0.5]^3 and trilinear sampling.

Grid nodes sit at cell centers: node ``i`` of a resolution-``n`` grid is at
``-0.5 + (i + 0.5) / n``.  Queries outside the node hull are clamped to the
boundary nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class VoxelGrid:
    values: np.ndarray  # (N, N, N)
    role: str = "occupancy"  # occupancy | probability | field
    origin: float = -0.5
    extent: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise InputError(f"voxel grid must be N x N x N, got {self.values.shape}")
        if self.values.shape[0] < 2:
            raise InputError("voxel grid resolution must be at least 2")

    @property
    def resolution(self):
        return self.values.shape[0]


def cell_centers(n):
    return -0.5 + (np.arange(n) + 0.5) / n


def cell_center_points(n):
    """All N^3 cell centers in C order, shape (N^3, 3)."""
    c = cell_centers(n)
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def voxel_indices(points, n):
    idx = np.floor((np.asarray(points, dtype=np.float64) + 0.5) * n).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def voxelize(points, n) -> VoxelGrid:
    """Binary grid: a cell is 1 iff at least one point falls in it (outside points clamped)."""
    if n < 2:
        raise ConfigError("resolution must be >= 2")
    pts = points.points if hasattr(points, "points") else np.asarray(points)
    grid = np.zeros((n, n, n), dtype=np.float32)
    if len(pts):
        i = voxel_indices(pts, n)
        grid[i[:, 0], i[:, 1], i[:, 2]] = 1.0
    return VoxelGrid(grid, role="occupancy")


def axis_weights(coords, r):
    """Lower/upper node index and blend factor along one axis for resolution ``r``."""
    u = np.clip((np.asarray(coords, dtype=np.float64) + 0.5) * r - 0.5, 0.0, r - 1)
    # the last node gets i0 == i1 and t == 0, so node values come back exactly
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, r - 1)
    return i0, i1, u - i0


def _lerp(a, b, t):
    # exact for a == b, which keeps constant fields constant
    return a + (b - a) * t


def trilinear_query_batch(grids, points):
    """Sample ``grids`` (B, C, R, R, R) at ``points`` (B, P, 3) -> (B, P, C).

    Interpolation runs axis by axis (x, then y, then z) so that
    :func:`trilinear_query_lattice` reproduces it bit for bit.
    """
    B, C, R = grids.shape[0], grids.shape[1], grids.shape[2]
    P = points.shape[1]
    flat = grids.transpose(0, 2, 3, 4, 1).reshape(B * R ** 3, C)
    dt = grids.dtype
    (x0, x1, tx), (y0, y1, ty), (z0, z1, tz) = (axis_weights(points[..., a], R) for a in range(3))
    base = (np.arange(B) * R ** 3)[:, None]
    tx, ty, tz = (t.astype(dt).reshape(B * P, 1) for t in (tx, ty, tz))

    def g(ix, iy, iz):
        return flat[(base + (ix * R + iy) * R + iz).reshape(-1)]

    c00 = _lerp(g(x0, y0, z0), g(x1, y0, z0), tx)
    c10 = _lerp(g(x0, y1, z0), g(x1, y1, z0), tx)
    c01 = _lerp(g(x0, y0, z1), g(x1, y0, z1), tx)
    c11 = _lerp(g(x0, y1, z1), g(x1, y1, z1), tx)
    c0 = _lerp(c00, c10, ty)
    c1 = _lerp(c01, c11, ty)
    out = _lerp(c0, c1, tz).reshape(B, P, C)
    cache = (grids.shape, base, (x0, x1, tx), (y0, y1, ty), (z0, z1, tz))
    return out, cache


def trilinear_query_batch_backward(dout, cache):
    """Scatter d(samples) (B, P, C) back onto the grids."""
    shape, base, (x0, x1, tx), (y0, y1, ty), (z0, z1, tz) = cache
    B, C, R = shape[0], shape[1], shape[2]
    d = dout.reshape(-1, C)
    flat = np.zeros((B * R ** 3, C), dtype=dout.dtype)
    for ix, wx in ((x0, 1 - tx), (x1, tx)):
        for iy, wy in ((y0, 1 - ty), (y1, ty)):
            for iz, wz in ((z0, 1 - tz), (z1, tz)):
                idx = (base + (ix * R + iy) * R + iz).reshape(-1)
                np.add.at(flat, idx, d * (wx * wy * wz))
    return flat.reshape(B, R, R, R, C).transpose(0, 4, 1, 2, 3)


def trilinear_query(grid, points):
    """Sample one feature volume (C, R, R, R) -- or a scalar volume (R, R, R) -- at points (P, 3)."""
    grid = np.asarray(grid)
    scalar = grid.ndim == 3
    g = grid[None, None] if scalar else grid[None]
    out, _ = trilinear_query_batch(g, np.asarray(points, dtype=np.float64)[None])
    return out[0, :, 0] if scalar else out[0]


def trilinear_query_lattice(grid, xs, ys=None, zs=None, out=None):
    """Sample ``grid`` (C, R, R, R) on the tensor-product lattice ``xs x ys x zs``.

    Returns channel-last (len(xs), len(ys), len(zs), C), written into ``out``
    when given.  Each value goes through the same lerp sequence as
    :func:`trilinear_query`, so it matches point-by-point evaluation exactly.
    """
    ys = xs if ys is None else ys
    zs = xs if zs is None else zs
    R = grid.shape[1]
    dt = grid.dtype
    g = np.ascontiguousarray(np.moveaxis(grid, 0, -1))  # (R, R, R, C)
    x0, x1, tx = axis_weights(xs, R)
    y0, y1, ty = axis_weights(ys, R)
    z0, z1, tz = axis_weights(zs, R)
    tx = tx.astype(dt)[:, None, None, None]
    ty = ty.astype(dt)[None, :, None, None]
    tz = tz.astype(dt)[None, None, :, None]
    a = _lerp(g[x0], g[x1], tx)
    b = _lerp(a[:, y0], a[:, y1], ty)
    lo, hi = b[:, :, z0], b[:, :, z1]
    if out is None:
        return _lerp(lo, hi, tz)
    np.subtract(hi, lo, out=out)
    out *= tz
    out += lo
    return out
