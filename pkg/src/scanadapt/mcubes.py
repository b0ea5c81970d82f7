"""Marching cubes over node-valued grids.

The 256-case triangle table is derived at import time instead of being typed
in.  For every corner configuration the isocontour is traced on the six cube
faces; ambiguous faces (two diagonal corners inside) always separate the
inside corners.  The rule only looks at the face itself, so neighbouring
cubes agree on every shared face and the extracted surface is closed.
Loops are fan-triangulated and oriented so normals point from inside
(value > iso) to outside.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .grid import cell_centers
from .mesh import TriMesh

# corner c has offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])


def _edge_list():
    edges = []
    for axis in range(3):
        for c in range(8):
            if not (c >> axis) & 1:
                edges.append((c, c | (1 << axis), axis))
    return edges


EDGES = _edge_list()  # (corner_a, corner_b, axis) with corner_a the lower end
_EDGE_ID = {frozenset(e[:2]): i for i, e in enumerate(EDGES)}


def _faces():
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            ring = []
            for bu, bv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                c = (side << axis) | (bu << u) | (bv << v)
                ring.append(c)
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            faces.append((ring, normal))
    return faces


FACES = _faces()


def _edge_mid(e):
    a, b, _ = EDGES[e]
    return (CORNERS[a] + CORNERS[b]) / 2.0


def _case_loops(case):
    inside = [(case >> c) & 1 for c in range(8)]
    nxt = {}
    for ring, normal in FACES:
        ring_edges = [_EDGE_ID[frozenset((ring[k], ring[(k + 1) % 4]))] for k in range(4)]
        crossing = [k for k in range(4) if inside[ring[k]] != inside[ring[(k + 1) % 4]]]
        segments = []
        if len(crossing) == 2:
            ins = [CORNERS[c] for c in ring if inside[c]]
            segments.append((ring_edges[crossing[0]], ring_edges[crossing[1]],
                             np.mean(ins, axis=0)))
        elif len(crossing) == 4:
            for k in range(4):
                if inside[ring[k]]:
                    segments.append((ring_edges[(k - 1) % 4], ring_edges[k],
                                     CORNERS[ring[k]].astype(float)))
        for ea, eb, ref in segments:
            ma, mb = _edge_mid(ea), _edge_mid(eb)
            left = np.cross(normal, mb - ma)
            if np.dot(left, ref - ma) < 0:
                ea, eb = eb, ea
            nxt[ea] = eb
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        e = nxt[start]
        while e != start:
            loop.append(e)
            seen.add(e)
            e = nxt[e]
        # loops wind counter-clockwise around the inside region seen from
        # outside the cube, which makes the fan face inwards; reverse it
        loops.append(loop[::-1])
    return loops


def _edge_faces(e):
    a, b, _ = EDGES[e]
    return {i for i, (ring, _) in enumerate(FACES) if a in ring and b in ring}


def _fan(loop):
    """Fan-triangulate ``loop`` from an apex whose chords never run along a cube face.

    A chord lying in a face could coincide with a chord of the neighbouring
    cube and make that mesh edge 4-valent.
    """
    n = len(loop)
    for r in range(n):
        rot = loop[r:] + loop[:r]
        apex = _edge_faces(rot[0])
        if all(not (apex & _edge_faces(rot[k])) for k in range(2, n - 1)):
            return [(rot[0], rot[k], rot[k + 1]) for k in range(1, n - 1)]
    return None


def _case_triangles(case):
    tris = []
    for loop in _case_loops(case):
        fan = _fan(loop)
        if fan is None:
            raise AssertionError(f"no face-free fan for case {case}")
        tris.extend(fan)
    return tris


@lru_cache(maxsize=1)
def triangle_table():
    """(256, T_max, 3) local edge ids padded with -1, and per-case triangle counts."""
    cases = [_case_triangles(c) for c in range(256)]
    tmax = max(len(t) for t in cases)
    table = -np.ones((256, tmax, 3), dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    for c, tris in enumerate(cases):
        counts[c] = len(tris)
        if tris:
            table[c, :len(tris)] = tris
    return table, counts


def marching_cubes(values, iso=0.5, coords=None) -> TriMesh:
    """Extract the ``values > iso`` boundary of an (N, N, N) node grid.

    Node ``i`` sits at ``coords[i]`` (cell centers of the canonical cube by
    default).  A node exactly at ``iso`` counts as outside.  Constant grids
    yield an empty mesh.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    coords = cell_centers(n) if coords is None else np.asarray(coords, dtype=np.float64)
    inside = values > iso
    m = n - 1
    case = np.zeros((m, m, m), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:dx + m, dy:dy + m, dz:dz + m].astype(np.int64) << c
    table, counts = triangle_table()
    active = np.nonzero(counts[case.reshape(-1)])[0]
    if len(active) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    ac = case.reshape(-1)[active]
    ci, cj, ck = np.unravel_index(active, (m, m, m))
    tris = table[ac]  # (A, T, 3)
    valid = np.arange(table.shape[1])[None, :] < counts[ac][:, None]
    cube = np.broadcast_to(np.arange(len(active))[:, None], valid.shape)[valid]
    local = tris[valid]  # (F, 3)

    # global edge key: (axis, i, j, k) of the edge's lower node
    edge_axis = np.array([e[2] for e in EDGES])
    edge_base = CORNERS[[e[0] for e in EDGES]]
    li, lj, lk = ci[cube][:, None], cj[cube][:, None], ck[cube][:, None]
    gi = li + edge_base[local, 0]
    gj = lj + edge_base[local, 1]
    gk = lk + edge_base[local, 2]
    key = ((edge_axis[local] * n + gi) * n + gj) * n + gk
    ukeys, inverse = np.unique(key.reshape(-1), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    ax = ukeys // n ** 3
    rest = ukeys % n ** 3
    i0, j0, k0 = rest // (n * n), (rest // n) % n, rest % n
    step = np.eye(3, dtype=np.int64)[ax]
    i1, j1, k1 = i0 + step[:, 0], j0 + step[:, 1], k0 + step[:, 2]
    v0 = values[i0, j0, k0]
    v1 = values[i1, j1, k1]
    t = (iso - v0) / (v1 - v0)
    p0 = np.stack([coords[i0], coords[j0], coords[k0]], axis=1)
    p1 = np.stack([coords[i1], coords[j1], coords[k1]], axis=1)
    verts = p0 + t[:, None] * (p1 - p0)
    return TriMesh(verts, faces)
