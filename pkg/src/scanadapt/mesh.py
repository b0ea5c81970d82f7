"""Triangle meshes and point clouds: containers, normalization, topology checks, file I/O."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InputError, ParseError

MESH_HEADER = "scoda-mesh v1"
NORMALIZED_EXTENT = 0.9


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise InputError("triangle index out of range")

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def corners(self):
        """(T, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def areas(self):
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def volume(self):
        """Signed enclosed volume; positive for outward-oriented closed meshes."""
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def copy(self):
        return TriMesh(self.vertices.copy(), self.triangles.copy())


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 3)
    cluster: np.ndarray | None = None  # (P,) ints in [0, K)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise InputError("point coordinates must be finite")
        if self.cluster is not None:
            self.cluster = np.asarray(self.cluster, dtype=np.int64).reshape(-1)
            if len(self.cluster) != len(self.points):
                raise InputError("cluster ids must match the number of points")

    def __len__(self):
        return len(self.points)


def concatenate(meshes):
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.concatenate(verts), np.concatenate(tris))


def normalize_mesh(mesh: TriMesh, extent=NORMALIZED_EXTENT) -> TriMesh:
    """Center the bounding box at the origin and scale its longest side to ``extent``."""
    if len(mesh.vertices) == 0 or mesh.is_empty:
        raise InputError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    size = (hi - lo).max()
    if size <= 0:
        raise InputError("mesh has zero extent")
    center = (lo + hi) / 2
    scale = extent / size
    return TriMesh((mesh.vertices - center) * scale, mesh.triangles.copy())


def _edges(mesh):
    t = mesh.triangles
    return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])


def is_watertight(mesh: TriMesh) -> bool:
    """Every undirected edge is shared by exactly two triangles."""
    if mesh.is_empty:
        return False
    e = np.sort(_edges(mesh), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def is_consistently_oriented(mesh: TriMesh) -> bool:
    """Every directed edge occurs once and its reverse occurs once."""
    if mesh.is_empty:
        return False
    e = _edges(mesh)
    n = len(mesh.vertices)
    fwd = e[:, 0] * n + e[:, 1]
    rev = e[:, 1] * n + e[:, 0]
    u, c = np.unique(fwd, return_counts=True)
    return bool(np.all(c == 1) and np.all(np.isin(rev, u)))


def connected_component_count(mesh: TriMesh) -> int:
    """Number of connected pieces, counting only vertices used by triangles."""
    if mesh.is_empty:
        return 0
    e = _edges(mesh)
    n = len(mesh.vertices)
    g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    return len(np.unique(labels[np.unique(mesh.triangles)]))


# -- file formats ------------------------------------------------------------

def write_mesh(path, mesh: TriMesh):
    buf = io.StringIO()
    buf.write(f"{MESH_HEADER}\n{len(mesh.vertices)}\n{len(mesh.triangles)}\n")
    if len(mesh.vertices):
        np.savetxt(buf, mesh.vertices, fmt="v %.17g %.17g %.17g")
    if len(mesh.triangles):
        np.savetxt(buf, mesh.triangles, fmt="f %d %d %d")
    Path(path).write_text(buf.getvalue())


def _floats(parts, lineno, n=3):
    if len(parts) < n:
        raise ParseError(f"expected {n} values", line=lineno)
    try:
        return [float(x) for x in parts[:n]]
    except ValueError:
        raise ParseError("bad number", line=lineno) from None


def read_mesh(path) -> TriMesh:
    """Read the native format, or a Wavefront-style file (1-based faces) when the header is absent."""
    lines = Path(path).read_text().splitlines()
    if lines and lines[0].strip() == MESH_HEADER:
        return _read_native(lines)
    return _read_obj(lines)


def _read_native(lines):
    if len(lines) < 3:
        raise ParseError("truncated header", line=len(lines) + 1)
    try:
        nv, nf = int(lines[1]), int(lines[2])
    except ValueError:
        raise ParseError("bad vertex/face count", line=2) from None
    if len(lines) < 3 + nv + nf:
        raise ParseError(f"expected {nv} vertices and {nf} faces, file ends early",
                         line=len(lines) + 1)
    verts = np.empty((nv, 3))
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nv):
        ln = 4 + i
        parts = lines[3 + i].split()
        if not parts or parts[0] != "v":
            raise ParseError("expected vertex line", line=ln)
        verts[i] = _floats(parts[1:], ln)
    for i in range(nf):
        ln = 4 + nv + i
        parts = lines[3 + nv + i].split()
        if len(parts) < 4 or parts[0] != "f":
            raise ParseError("expected face line", line=ln)
        try:
            faces[i] = [int(x) for x in parts[1:4]]
        except ValueError:
            raise ParseError("bad face index", line=ln) from None
        if faces[i].min() < 0 or faces[i].max() >= nv:
            raise ParseError("face index out of range", line=ln)
    return TriMesh(verts, faces)


def _read_obj(lines):
    verts, faces = [], []
    for ln, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append(_floats(parts[1:], ln))
        elif parts[0] == "f":
            if len(parts) < 4:
                raise ParseError("face needs at least 3 vertices", line=ln)
            try:
                idx = [int(p.split("/")[0]) for p in parts[1:]]
            except ValueError:
                raise ParseError("bad face index", line=ln) from None
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if min(idx) < 0 or max(idx) >= len(verts):
                raise ParseError("face index out of range", line=ln)
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise ParseError("no vertices found", line=len(lines))
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_points(path, cloud: PointCloud, header=None):
    buf = io.StringIO()
    if header:
        for line in header.splitlines():
            buf.write(f"# {line}\n")
    if cloud.cluster is None:
        np.savetxt(buf, cloud.points, fmt="%.17g %.17g %.17g")
    else:
        np.savetxt(buf, np.column_stack([cloud.points, cloud.cluster]),
                   fmt="%.17g %.17g %.17g %d")
    Path(path).write_text(buf.getvalue())


def read_points(path) -> PointCloud:
    pts, clusters = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) not in (3, 4):
            raise ParseError("expected 'x y z [cluster]'", line=ln)
        pts.append(_floats(parts, ln))
        if len(parts) == 4:
            try:
                clusters.append(int(parts[3]))
            except ValueError:
                raise ParseError("bad cluster id", line=ln) from None
    if clusters and len(clusters) != len(pts):
        raise ParseError("cluster ids present on some lines only")
    return PointCloud(np.array(pts).reshape(-1, 3), np.array(clusters) if clusters else None)
