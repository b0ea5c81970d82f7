"""Procedural shape categories built from boxes, cylinders and spheres.

Each part carries an exact signed distance function and an explicit
tessellation.  The welded shape is the zero level set of the union
(minimum) of part distances, extracted by marching cubes on a fine grid.
The y axis points up.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import cell_centers
from .mcubes import marching_cubes
from .mesh import TriMesh, concatenate, normalize_mesh

CATEGORIES = ("blocky", "table", "lamp")
WELD_RESOLUTION = 64


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def mesh(self):
        c, h = np.asarray(self.center), np.asarray(self.half)
        v = c + h * (2 * np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1]
                                   for i in range(8)]) - 1)
        f = [[0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
             [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5]]
        return TriMesh(v, f)


@dataclass(frozen=True)
class Cylinder:
    """Upright (y-axis) cylinder."""
    center: tuple
    radius: float
    half_height: float

    def sdf(self, p):
        d = p - np.asarray(self.center)
        dr = np.hypot(d[..., 0], d[..., 2]) - self.radius
        dy = np.abs(d[..., 1]) - self.half_height
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dy, 0.0))
        return outside + np.minimum(np.maximum(dr, dy), 0.0)

    def mesh(self, segments=24):
        c = np.asarray(self.center)
        a = 2 * np.pi * np.arange(segments) / segments
        ring = np.stack([self.radius * np.cos(a), np.zeros(segments), self.radius * np.sin(a)], 1)
        bottom = c + ring - [0, self.half_height, 0]
        top = c + ring + [0, self.half_height, 0]
        v = np.concatenate([bottom, top, [c - [0, self.half_height, 0], c + [0, self.half_height, 0]]])
        f = []
        nb, nt = 2 * segments, 2 * segments + 1
        for i in range(segments):
            j = (i + 1) % segments
            f += [[i, j, segments + i], [j, segments + j, segments + i],
                  [nb, j, i], [nt, segments + i, segments + j]]
        return TriMesh(v, f)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def mesh(self, rings=12, segments=24):
        c = np.asarray(self.center)
        v = [c + [0, self.radius, 0]]
        for i in range(1, rings):
            th = np.pi * i / rings
            for j in range(segments):
                ph = 2 * np.pi * j / segments
                v.append(c + self.radius * np.array([np.sin(th) * np.cos(ph), np.cos(th),
                                                     np.sin(th) * np.sin(ph)]))
        v.append(c - [0, self.radius, 0])
        f = []
        last = len(v) - 1
        for j in range(segments):
            jn = (j + 1) % segments
            f.append([0, 1 + jn, 1 + j])
            base = 1 + (rings - 2) * segments
            f.append([last, base + j, base + jn])
        for i in range(rings - 2):
            r0, r1 = 1 + i * segments, 1 + (i + 1) * segments
            for j in range(segments):
                jn = (j + 1) % segments
                f += [[r0 + j, r0 + jn, r1 + j], [r0 + jn, r1 + jn, r1 + j]]
        return TriMesh(np.array(v), f)


def _blocky(rng):
    main = Box((0.0, 0.0, 0.0), tuple(rng.uniform(0.15, 0.3, 3)))
    parts = [main]
    for _ in range(rng.integers(1, 4)):
        axis = rng.integers(3)
        sign = rng.choice([-1.0, 1.0])
        half = rng.uniform(0.07, 0.16, 3)
        center = rng.uniform(-1, 1, 3) * (np.asarray(main.half) - half).clip(0)
        # sink the block into the chosen face so the union stays connected
        center[axis] = sign * (main.half[axis] + half[axis] * rng.uniform(0.0, 0.8))
        lim = 0.45 - half
        parts.append(Box(tuple(np.clip(center, -lim, lim)), tuple(half)))
    return parts


def _table(rng):
    hx, hz = rng.uniform(0.28, 0.42), rng.uniform(0.2, 0.35)
    thick = rng.uniform(0.03, 0.05)
    top_y = rng.uniform(0.05, 0.3)
    leg = rng.uniform(0.035, 0.055)
    bottom = -0.42
    parts = [Box((0.0, top_y, 0.0), (hx, thick, hz))]
    leg_half_h = (top_y - bottom) / 2
    inset = rng.uniform(0.02, 0.06)
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx, cz = sx * (hx - leg - inset), sz * (hz - leg - inset)
            parts.append(Box((cx, bottom + leg_half_h, cz), (leg, leg_half_h, leg)))
    return parts


def _lamp(rng):
    base_r = rng.uniform(0.14, 0.22)
    base_h = rng.uniform(0.025, 0.045)
    bottom = -0.42
    pole_r = rng.uniform(0.035, 0.05)
    top = rng.uniform(0.05, 0.2)
    parts = [Cylinder((0.0, bottom + base_h, 0.0), base_r, base_h),
             Cylinder((0.0, (bottom + top) / 2, 0.0), pole_r, (top - bottom) / 2)]
    if rng.random() < 0.5:
        r = rng.uniform(0.12, 0.2)
        parts.append(Sphere((0.0, top + 0.6 * r, 0.0), r))
    else:
        r, h = rng.uniform(0.14, 0.24), rng.uniform(0.07, 0.12)
        parts.append(Cylinder((0.0, top + 0.5 * h, 0.0), r, h))
    return parts


_BUILDERS = {"blocky": _blocky, "table": _table, "lamp": _lamp}


def shape_parts(category, seed):
    if category not in _BUILDERS:
        raise ValueError(f"unknown category {category!r}; choose from {CATEGORIES}")
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    return _BUILDERS[category](rng)


def parts_mesh(parts) -> TriMesh:
    """Unwelded concatenation of the part tessellations."""
    return concatenate([p.mesh() for p in parts])


def union_sdf(parts, points):
    return np.min([p.sdf(points) for p in parts], axis=0)


def generate_shape(category, seed, resolution=WELD_RESOLUTION) -> TriMesh:
    """Deterministic watertight shape: union of seeded parts, welded and normalized."""
    parts = shape_parts(category, seed)
    c = cell_centers(resolution)
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    d = union_sdf(parts, pts)
    mesh = marching_cubes(-d, iso=0.0)
    return normalize_mesh(mesh)
