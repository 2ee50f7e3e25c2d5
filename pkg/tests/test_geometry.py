import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geodist import geometry as g
from geodist.geometry import Mesh, MeshError


def unit_square():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


# ---------------------------------------------------------------- OBJ


def test_parse_quad_is_fan_triangulated():
    m = g.parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])
    assert m.area() == pytest.approx(1.0)


def test_parse_slashes_negative_indices_comments():
    text = """# header
v 0 0 0
v 1 0 0   # trailing comment
v 0 1 0
vt 0 0
vn 0 0 1
f -3/1/1 -2/1/1 -1/1/1
"""
    m = g.parse_obj(text)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2]])


def test_parse_vertex_colors():
    m = g.parse_obj("v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nf 1 2 3\n")
    assert m.channels == 6
    pts = g.sample_surface(m, 100, seed=0)
    assert pts.shape == (100, 6)
    # colors are barycentric in the same coordinates as positions here
    np.testing.assert_allclose(pts[:, 4], pts[:, 0], atol=1e-12)
    np.testing.assert_allclose(pts[:, 5], pts[:, 1], atol=1e-12)


@pytest.mark.parametrize("text, match", [
    ("v 0 0 0\nv 1 0 0\nf 1 2 3\n", "out of range"),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 0\n", "1-based"),
    ("v 0 0 x\n", "bad vertex"),
    ("v 0 0\n", "3 or 6"),
    ("# nothing\n", "empty"),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\n", "empty"),
    ("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n", "zero total area"),
])
def test_parse_errors(text, match):
    with pytest.raises(MeshError, match=match):
        g.parse_obj(text)


def test_degenerate_faces_dropped():
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n"
    m = g.parse_obj(text)
    assert len(m.faces) == 1


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        g.load_mesh(tmp_path / "nope.obj")


def test_save_load_roundtrip(tmp_path):
    m = g.icosphere(1)
    g.save_obj(m, tmp_path / "s.obj")
    back = g.load_mesh(tmp_path / "s.obj")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_mesh_is_immutable():
    m = unit_square()
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


# ---------------------------------------------------------------- shapes


def test_icosphere_counts_and_radius():
    m = g.icosphere(5)
    assert len(m.faces) == 20480
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-12)
    assert m.area() == pytest.approx(4 * np.pi, rel=2e-3)


def test_torus_area():
    m = g.torus(1.0, 0.4, 192, 96)
    assert m.area() == pytest.approx(4 * np.pi**2 * 0.4, rel=1e-3)


# ---------------------------------------------------------------- sampling


def test_sampling_is_area_weighted():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]], float)
    m = Mesh(v, np.array([[0, 1, 2], [3, 4, 5]]))  # areas 0.5 and 3
    pts = g.sample_surface(m, 200_000, seed=1)
    frac = np.mean(pts[:, 0] < 5)
    # binomial std ~ 8e-4
    assert frac == pytest.approx(0.5 / 3.5, abs=4e-3)


def test_samples_lie_on_faces():
    m = g.icosphere(2)
    pts = g.sample_surface(m, 5000, seed=2)
    d = g.point_mesh_distance(pts, m)
    assert d.max() < 1e-12


def test_sampling_uniform_on_square():
    pts = g.sample_surface(unit_square(), 100_000, seed=3)
    assert pts[:, :2].mean(0) == pytest.approx([0.5, 0.5], abs=5e-3)
    assert pts[:, :2].var(0) == pytest.approx([1 / 12, 1 / 12], abs=2e-3)
    hist, _ = np.histogram(pts[:, 0], bins=10, range=(0, 1))
    assert np.all(np.abs(hist / 10_000 - 1) < 0.05)


def test_sampling_deterministic_and_edge_counts():
    m = g.icosphere(2)
    np.testing.assert_array_equal(g.sample_surface(m, 100, 7), g.sample_surface(m, 100, 7))
    assert g.sample_surface(m, 0, 0).shape == (0, 3)
    with pytest.raises(ValueError):
        g.sample_surface(m, -1, 0)


# ---------------------------------------------------------------- normalization


def test_normalization_gives_zero_mean_unit_std():
    m = g.torus(2.0, 0.5, 48, 24)
    v = m.vertices + np.array([5.0, -3.0, 1.0])
    m = Mesh(v * 3.0, m.faces)
    norm = g.normalization_transform(m, 1_000_000, seed=0)
    nm = Mesh(norm.apply(m.vertices), m.faces)
    pts = g.sample_surface(nm, 1_000_000, seed=1)
    assert abs(pts.mean()) < 5e-3
    assert pts.std() == pytest.approx(1.0, abs=5e-3)
    np.testing.assert_allclose(norm.invert(norm.apply(m.vertices)), m.vertices, atol=1e-12)


def test_normalize_mesh_returns_shift_vector_and_scale():
    nm, shift, scale = g.normalize_mesh(g.icosphere(2), 10_000, seed=0)
    assert shift.shape == (3,) and np.all(shift == shift[0])
    assert scale > 0
    with pytest.raises(ValueError):
        g.normalize_mesh(g.icosphere(2), 10)


# ---------------------------------------------------------------- closest point


def dense_triangle_min(p, tri, n=400):
    # oracle: minimum over a fine barycentric grid (upper bound on the true distance)
    u, v = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1))
    keep = u + v <= 1
    u, v = u[keep], v[keep]
    q = tri[0] + u[:, None] * (tri[1] - tri[0]) + v[:, None] * (tri[2] - tri[0])
    return np.min(np.sum((q - p) ** 2, axis=1))


def test_closest_point_regions():
    tri = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    cases = [
        ([0.2, 0.2, 1.0], [0.2, 0.2, 0.0]),  # interior
        ([-1.0, -1.0, 0.0], [0.0, 0.0, 0.0]),  # vertex a
        ([2.0, -0.5, 0.0], [1.0, 0.0, 0.0]),  # vertex b
        ([0.5, -1.0, 0.3], [0.5, 0.0, 0.0]),  # edge ab
        ([1.0, 1.0, 0.0], [0.5, 0.5, 0.0]),  # edge bc
        ([-1.0, 0.5, 0.0], [0.0, 0.5, 0.0]),  # edge ca
    ]
    for p, want in cases:
        c, d2 = g.point_triangle_closest(np.array(p), tri)
        np.testing.assert_allclose(c, want, atol=1e-15)
        assert d2 == pytest.approx(np.sum((np.array(p) - want) ** 2), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_closest_point_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    tri = rng.standard_normal((3, 3))
    p = rng.standard_normal(3) * 2
    c, d2 = g.point_triangle_closest(p, tri)
    grid = dense_triangle_min(p, tri)
    edge = max(np.linalg.norm(tri[1] - tri[0]), np.linalg.norm(tri[2] - tri[0]))
    assert d2 <= grid + 1e-12
    # grid spacing h bounds the gap: sqrt(grid) - sqrt(d2) <= h
    assert np.sqrt(grid) - np.sqrt(d2) <= 2 * edge / 400 + 1e-12
    assert np.sum((c - p) ** 2) == pytest.approx(d2, rel=1e-12, abs=1e-15)


def test_closest_point_degenerate_triangle():
    tri = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    c, d2 = g.point_triangle_closest(np.array([1.5, 1.0, 0.0]), tri)
    np.testing.assert_allclose(c, [1.5, 0, 0], atol=1e-12)
    assert d2 == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_bvh_matches_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    m = g.torus(1.0, 0.3, 40, 20) if seed % 2 else g.icosphere(3)
    pts = rng.standard_normal((3000, 3)) * 1.5
    bp, bd, bf = g.TriangleBVH(m, leaf_size=1 + seed).query(pts)
    rp, rd, rf = g.closest_points_brute(pts, m)
    np.testing.assert_array_equal(bd, rd)
    np.testing.assert_array_equal(bf, rf)
    np.testing.assert_array_equal(bp, rp)


def test_point_mesh_distance_on_sphere():
    m = g.icosphere(5)
    rng = np.random.default_rng(0)
    d = rng.standard_normal((2000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * 2.0
    dist = g.point_mesh_distance(pts, m)
    # facets sit inside the unit sphere by at most ~1e-3 at this resolution
    np.testing.assert_allclose(dist, 1.0, atol=1.5e-3)
    assert np.all(dist >= 1.0 - 1e-12)


def test_point_mesh_distance_empty_and_bad_shape():
    m = g.icosphere(1)
    assert g.point_mesh_distance(np.zeros((0, 3)), m).shape == (0,)
    with pytest.raises(ValueError):
        g.point_mesh_distance(np.zeros((4, 2)), m)
