import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import trilinear_at, uv_sphere
from scanadapt.errors import InputError, ParseError
from scanadapt.grid import (VoxelGrid, cell_center_points, cell_centers, trilinear_query,
                            trilinear_query_batch, trilinear_query_lattice, voxel_indices, voxelize)
from scanadapt.mcubes import marching_cubes
from scanadapt.mesh import (PointCloud, TriMesh, connected_component_count, is_consistently_oriented,
                            is_watertight, normalize_mesh, read_mesh, read_points, write_mesh,
                            write_points)
from scanadapt.occupancy import QueryBatch, occupancy_grid, points_inside, sample_occupancy
from scanadapt.shapes import CATEGORIES, Box, generate_shape, parts_mesh, shape_parts


def unit_cube(center=(0, 0, 0), edge=1.0):
    return Box(tuple(center), (edge / 2,) * 3).mesh()


# -- normalization -----------------------------------------------------------

def test_normalize_offset_cube():
    m = normalize_mesh(unit_cube((10, 0, 0)))
    lo, hi = m.bounds()
    np.testing.assert_allclose((lo + hi) / 2, 0, atol=1e-12)
    np.testing.assert_allclose(hi - lo, 0.9, atol=1e-12)


def test_normalize_idempotent():
    m = normalize_mesh(generate_shape("table", 3, resolution=32))
    np.testing.assert_allclose(normalize_mesh(m).vertices, m.vertices, atol=1e-12)


@given(seed=st.integers(0, 2 ** 32 - 1))
def test_normalize_random_mesh_extent(seed):
    rng = np.random.default_rng(seed)
    m = TriMesh(rng.normal(size=(10, 3)) * rng.uniform(0.1, 50), rng.integers(0, 10, size=(6, 3)))
    lo, hi = normalize_mesh(m).bounds()
    assert abs((hi - lo).max() - 0.9) <= 1e-9


def test_normalize_empty():
    with pytest.raises(InputError):
        normalize_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))))


# -- voxelize ----------------------------------------------------------------

def test_voxelize_origin():
    g = voxelize(np.zeros((1, 3)), 32)
    assert g.values.sum() == 1 and g.values[16, 16, 16] == 1


def test_voxelize_upper_boundary_clamped():
    g = voxelize(np.array([[0.5, 0.5, -0.5]]), 32)
    assert g.values[31, 31, 0] == 1


def test_voxelize_matches_per_point_oracle():
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(1000, 3))
    g = voxelize(pts, 16).values
    expect = {tuple(min(int(np.floor((c + 0.5) * 16)), 15) for c in p) for p in pts}
    assert set(map(tuple, np.argwhere(g == 1))) == expect


def test_voxel_grid_validation():
    with pytest.raises(InputError):
        VoxelGrid(np.zeros((1, 1, 1)))
    with pytest.raises(InputError):
        VoxelGrid(np.zeros((2, 3, 2)))


# -- trilinear ---------------------------------------------------------------

def test_trilinear_at_node():
    g = np.random.default_rng(0).normal(size=(2, 5, 5, 5))
    c = cell_centers(5)
    out = trilinear_query(g, np.array([[c[1], c[3], c[4]]]))
    assert np.array_equal(out[0], g[:, 1, 3, 4])


def test_trilinear_corner_is_mean_of_eight():
    g = np.random.default_rng(1).normal(size=(3, 4, 4, 4))
    # the corner shared by cells 1 and 2 on every axis
    out = trilinear_query(g, np.zeros((1, 3)))
    np.testing.assert_allclose(out[0], g[:, 1:3, 1:3, 1:3].reshape(3, -1).mean(axis=1), atol=1e-15)


def trilinear_poly(c, x, y, z):
    return (c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * y * z + c[6] * x * z
            + c[7] * x * y * z)


def test_trilinear_reproduces_polynomial():
    rng = np.random.default_rng(2)
    coef = rng.normal(size=8)
    n = 8
    c = cell_centers(n)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    g = trilinear_poly(coef, X, Y, Z)
    lo, hi = c[0], c[-1]  # inside the node hull no clamping happens
    p = rng.uniform(lo, hi, size=(1000, 3))
    got = trilinear_query(g, p)
    np.testing.assert_allclose(got, trilinear_poly(coef, *p.T), rtol=0, atol=1e-12)


def test_trilinear_clamps_outside():
    g = np.random.default_rng(3).normal(size=(1, 4, 4, 4))
    c = cell_centers(4)
    a = trilinear_query(g, np.array([[-0.5, 0.7, c[2]]]))
    b = trilinear_query(g, np.array([[c[0], c[3], c[2]]]))
    assert np.array_equal(a, b)


def test_trilinear_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    g = rng.normal(size=(3, 5, 5, 5))
    p = rng.uniform(-0.55, 0.55, size=(50, 3))
    got = trilinear_query(g, p)
    ref = np.array([trilinear_at(g, q) for q in p])
    np.testing.assert_allclose(got, ref, atol=1e-13)


@given(value=st.floats(-1e3, 1e3), n=st.integers(2, 9), seed=st.integers(0, 1000))
def test_constant_field_exact(value, n, seed):
    g = np.full((n, n, n), value)
    p = np.random.default_rng(seed).uniform(-0.6, 0.6, size=(20, 3))
    assert np.all(trilinear_query(g, p) == value)


def test_lattice_matches_pointwise_bits():
    rng = np.random.default_rng(5)
    g = rng.normal(size=(4, 8, 8, 8)).astype(np.float32)
    xs, ys, zs = cell_centers(6), cell_centers(5)[::-1], cell_centers(7)
    lat = trilinear_query_lattice(g, xs, ys, zs)
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), -1).reshape(-1, 3)
    assert np.array_equal(lat.reshape(-1, 4), trilinear_query(g, pts))


def test_batch_query_shapes():
    g = np.zeros((2, 3, 4, 4, 4))
    out, _ = trilinear_query_batch(g, np.zeros((2, 7, 3)))
    assert out.shape == (2, 7, 3)


# -- meshes and io -----------------------------------------------------------

def test_cube_topology():
    m = unit_cube()
    assert is_watertight(m) and is_consistently_oriented(m)
    assert m.volume() == pytest.approx(1.0)


def test_open_mesh_not_watertight():
    m = unit_cube()
    assert not is_watertight(TriMesh(m.vertices, m.triangles[:-1]))


def test_mesh_roundtrip(tmp_path):
    m = generate_shape("lamp", 1, resolution=32)
    write_mesh(tmp_path / "m.txt", m)
    back = read_mesh(tmp_path / "m.txt")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)


def test_obj_reader(tmp_path):
    (tmp_path / "m.obj").write_text("# tetra\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n"
                                    "f 1 3 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n")
    m = read_mesh(tmp_path / "m.obj")
    assert m.triangles.min() == 0 and is_watertight(m) and m.volume() > 0


@pytest.mark.parametrize("text,line", [
    ("scoda-mesh v1\n3\n1\nv 0 0 0\nv 1 0 0\n", 6),
    ("scoda-mesh v1\n1\n0\nv 0 zero 0\n", 4),
    ("scoda-mesh v1\n3\n1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 9\n", 7),
])
def test_mesh_parse_errors(tmp_path, text, line):
    (tmp_path / "m.txt").write_text(text)
    with pytest.raises(ParseError) as e:
        read_mesh(tmp_path / "m.txt")
    assert e.value.line == line


def test_points_comments_skipped(tmp_path):
    (tmp_path / "p.xyz").write_text("# header\n0 0 0\n\n1 2 3 # trailing\n# end\n")
    p = read_points(tmp_path / "p.xyz")
    assert np.array_equal(p.points, [[0, 0, 0], [1, 2, 3]]) and p.cluster is None


def test_points_roundtrip_with_clusters(tmp_path):
    rng = np.random.default_rng(0)
    c = PointCloud(rng.normal(size=(20, 3)), rng.integers(0, 8, 20))
    write_points(tmp_path / "p.xyz", c, header="a\nb")
    back = read_points(tmp_path / "p.xyz")
    assert np.array_equal(back.points, c.points) and np.array_equal(back.cluster, c.cluster)


def test_points_truncated_line(tmp_path):
    (tmp_path / "p.xyz").write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError) as e:
        read_points(tmp_path / "p.xyz")
    assert e.value.line == 2


# -- marching cubes ----------------------------------------------------------

def test_mc_constant_grid_empty():
    assert marching_cubes(np.zeros((8, 8, 8))).is_empty
    assert marching_cubes(np.ones((8, 8, 8))).is_empty


def test_mc_threshold_is_strict():
    assert marching_cubes(np.full((4, 4, 4), 0.5)).is_empty


def test_mc_single_cell():
    v = np.zeros((5, 5, 5))
    v[2, 2, 2] = 1
    m = marching_cubes(v)
    assert is_watertight(m) and is_consistently_oriented(m) and m.volume() > 0
    c = cell_centers(5)[2]
    assert np.all(np.abs(m.vertices - c) <= 1 / 5)


def sphere_grid(r, n):
    p = cell_center_points(n)
    return (np.linalg.norm(p, axis=1) < r).reshape(n, n, n).astype(float)


def test_mc_sphere_geometry():
    r, n = 0.35, 64
    m = marching_cubes(sphere_grid(r, n))
    assert is_watertight(m) and is_consistently_oriented(m)
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - r).max() <= 2 / n
    assert abs(m.volume() / (4 / 3 * np.pi * r ** 3) - 1) < 0.10


@given(seed=st.integers(0, 2 ** 32 - 1), density=st.floats(0.05, 0.9))
def test_mc_random_grids_closed(seed, density):
    rng = np.random.default_rng(seed)
    v = np.zeros((8, 8, 8))
    v[1:-1, 1:-1, 1:-1] = rng.random((6, 6, 6)) < density
    m = marching_cubes(v)
    if not m.is_empty:
        assert is_watertight(m) and is_consistently_oriented(m) and m.volume() > 0


# -- occupancy ---------------------------------------------------------------

def test_inside_cube_origin_and_far_point():
    m = unit_cube()
    assert points_inside(m, np.array([[0.0, 0, 0]]))[0]
    assert not points_inside(m, np.array([[2.0, 0, 0]]))[0]


def test_sample_occupancy_sphere_agreement():
    r = 0.4
    q = sample_occupancy(uv_sphere(r), 3000, 3000, seed=1)
    d = np.linalg.norm(q.points, axis=1)
    far = np.abs(d - r) > 1e-3
    assert far.sum() > 5000
    assert np.array_equal(q.labels[far].astype(bool), d[far] < r)
    assert np.abs(q.points).max() <= 0.55


def test_labels_invariant_to_triangle_order():
    m = generate_shape("blocky", 2, resolution=32)
    perm = np.random.default_rng(0).permutation(len(m.triangles))
    shuffled = TriMesh(m.vertices, m.triangles[perm])
    a = sample_occupancy(m, 500, 500, seed=3)
    b = sample_occupancy(shuffled, 500, 500, seed=3)
    # surface samples follow triangle order; the uniform half does not
    assert np.array_equal(a.labels[:500], b.labels[:500])
    assert np.array_equal(points_inside(m, a.points), points_inside(shuffled, a.points))


def test_non_watertight_fallback_warns():
    m = unit_cube()
    open_mesh = TriMesh(m.vertices, m.triangles[:-1])
    with pytest.warns(UserWarning):
        q = sample_occupancy(open_mesh, 10, 10, seed=0)
    assert q.single_ray


def test_occupancy_grid_matches_pointwise():
    m = generate_shape("table", 4, resolution=32)
    g = occupancy_grid(m, 16)
    pts = cell_center_points(16)
    assert np.array_equal(g.reshape(-1), points_inside(m, pts))


def test_query_batch_validation():
    with pytest.raises(InputError):
        QueryBatch(np.zeros((3, 3)), np.zeros(2))
    with pytest.raises(InputError):
        QueryBatch(np.array([[0.7, 0, 0]]), np.zeros(1))


# -- procedural shapes -------------------------------------------------------

@pytest.mark.parametrize("cat", CATEGORIES)
def test_generate_shape_deterministic_and_closed(cat):
    a = generate_shape(cat, 11)
    b = generate_shape(cat, 11)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)
    assert is_watertight(a) and is_consistently_oriented(a)
    assert connected_component_count(a) == 1
    assert np.abs(a.vertices).max() <= 0.45 + 1e-12


def test_blocky_seed0_watertight():
    assert is_watertight(generate_shape("blocky", 0))


def test_table_components_before_and_after_weld():
    parts = shape_parts("table", 5)
    assert connected_component_count(parts_mesh(parts)) == 5
    assert connected_component_count(generate_shape("table", 5)) == 1


def test_generated_triangles_not_degenerate():
    assert generate_shape("lamp", 2).areas().min() > 0


def test_unknown_category():
    with pytest.raises(ValueError):
        generate_shape("chair", 0)


def test_voxel_indices_clip():
    assert np.array_equal(voxel_indices(np.array([[-9.0, 9.0, 0.0]]), 4), [[0, 3, 2]])
