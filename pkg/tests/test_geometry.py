import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapnerf.geometry import (
    Camera,
    Ray,
    TriangleMesh,
    delaunay_triangulate,
    intersect_mesh,
    intersect_mesh_bruteforce,
    look_at_pose,
    ray_for_pixel,
)

IDENTITY = np.hstack([np.eye(3), np.zeros((3, 1))])


def _random_camera(rng, w=20, h=16):
    pos = rng.normal(size=3)
    fwd = rng.normal(size=3)
    fwd[2] = 0.3 * fwd[2]
    return Camera(rng.uniform(10, 40), rng.uniform(10, 40), w / 2, h / 2, w, h, look_at_pose(pos, fwd))


def test_principal_ray_is_forward_axis():
    cam = Camera(30.0, 30.0, 10.5, 8.5, 21, 17, look_at_pose([1, 2, 3], [1, 1, 0]))
    r = ray_for_pixel(cam, 10, 8)
    np.testing.assert_allclose(r.direction, cam.rotation[:, 2], atol=1e-12)
    np.testing.assert_array_equal(r.origin, cam.position)


def test_pinhole_offset_direction():
    cam = Camera(100.0, 100.0, 100.5, 49.5, 400, 100, IDENTITY)
    # pixel center u + 0.5 = cx + 100, v + 0.5 = cy
    r = ray_for_pixel(cam, 200, 49)
    np.testing.assert_allclose(r.direction, np.array([1.0, 0.0, 1.0]) / np.sqrt(2), atol=1e-12)


def test_projection_round_trip_every_pixel():
    rng = np.random.default_rng(1)
    for _ in range(5):
        cam = _random_camera(rng)
        o, d = cam.pixel_rays()
        uv, z = cam.project(o + 5.0 * d)
        v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        expect = np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=-1)
        assert np.abs(uv - expect).max() < 1e-9
        assert np.all(z > 0)


def test_pixel_rays_match_ray_for_pixel():
    cam = _random_camera(np.random.default_rng(2))
    o, d = cam.pixel_rays()
    r = ray_for_pixel(cam, 7, 3)
    np.testing.assert_array_equal(d[3 * cam.width + 7], r.direction)


@pytest.mark.parametrize("u,v", [(-1, 0), (0, -1), (20, 0), (0, 16)])
def test_out_of_bounds_pixel_rejected(u, v):
    cam = _random_camera(np.random.default_rng(0))
    with pytest.raises(ValueError):
        ray_for_pixel(cam, u, v)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 19), st.integers(0, 15), st.integers(0, 2**31))
def test_ray_directions_unit(u, v, seed):
    cam = _random_camera(np.random.default_rng(seed))
    assert abs(np.linalg.norm(ray_for_pixel(cam, u, v).direction) - 1.0) <= 1e-12


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 1.0, 1.0, 4, 4, IDENTITY)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 5.0, 1.0, 4, 4, IDENTITY)
    bad = IDENTITY.copy()
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 1.0, 1.0, 4, 4, bad)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), near=2.0, far=1.0)


def _plane():
    V = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], dtype=float)
    return TriangleMesh(V, np.array([[0, 1, 2], [0, 2, 3]]))


def test_vertical_ray_hits_plane():
    hit = intersect_mesh(Ray(np.array([0.2, 0.1, 2.0]), np.array([0.0, 0.0, -1.0])), _plane())
    assert hit is not None and hit.t == 2.0
    assert abs(sum(hit.barycentric) - 1.0) < 1e-12


def test_ray_away_misses():
    assert intersect_mesh(Ray(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, 1.0])), _plane()) is None


def test_far_bound_respected():
    assert intersect_mesh(Ray(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, -1.0]), 0.0, 1.5), _plane()) is None


def _random_mesh(rng, n_tri=500):
    centers = rng.uniform(-5, 5, size=(n_tri, 1, 3))
    V = (centers + rng.normal(scale=0.6, size=(n_tri, 3, 3))).reshape(-1, 3)
    return TriangleMesh(V, np.arange(3 * n_tri).reshape(n_tri, 3))


def test_bvh_matches_bruteforce_exactly():
    rng = np.random.default_rng(7)
    mesh = _random_mesh(rng)
    o = rng.uniform(-8, 8, size=(1000, 3))
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t1, id1, b1 = mesh.intersect(o, d)
    t2, id2, b2 = mesh.intersect_bruteforce(o, d)
    assert (id1 >= 0).sum() > 100
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_array_equal(id1, id2)
    np.testing.assert_array_equal(b1, b2)
    r = Ray(o[0], d[0])
    assert intersect_mesh(r, mesh) == intersect_mesh_bruteforce(r, mesh)


def test_intersection_independent_of_triangle_order():
    rng = np.random.default_rng(8)
    mesh = _random_mesh(rng, 200)
    perm = rng.permutation(len(mesh))
    shuffled = TriangleMesh(mesh.vertices, mesh.triangles[perm])
    o = rng.uniform(-8, 8, size=(500, 3))
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    np.testing.assert_array_equal(mesh.intersect(o, d)[0], shuffled.intersect(o, d)[0])


def test_degenerate_triangle_rejected():
    V = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(ValueError):
        TriangleMesh(V, np.array([[0, 1, 2]]))


# --- Delaunay ---------------------------------------------------------------------


def _hull_area(P):
    pts = sorted(map(tuple, P))

    def half(seq):
        h = []
        for p in seq:
            while len(h) >= 2 and (h[-1][0] - h[-2][0]) * (p[1] - h[-2][1]) - (h[-1][1] - h[-2][1]) * (p[0] - h[-2][0]) <= 0:
                h.pop()
            h.append(p)
        return h

    hull = np.array(half(pts)[:-1] + half(pts[::-1])[:-1])
    x, y = hull[:, 0], hull[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _circumcircle(a, b, c):
    d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
    uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
    center = np.array([ux, uy])
    return center, np.linalg.norm(a - center)


def check_delaunay(P, tris, margin=1e-9):
    A = P[tris]
    signed = 0.5 * ((A[:, 1, 0] - A[:, 0, 0]) * (A[:, 2, 1] - A[:, 0, 1])
                    - (A[:, 1, 1] - A[:, 0, 1]) * (A[:, 2, 0] - A[:, 0, 0]))
    assert np.all(signed > 0), "triangles must be CCW and non-degenerate"
    assert abs(signed.sum() - _hull_area(P)) < 1e-9 * max(1.0, _hull_area(P))
    assert len(np.unique(tris)) == len(P), "every point is a vertex"
    for t in tris:
        c, r = _circumcircle(*P[t])
        others = np.delete(np.arange(len(P)), t)
        assert np.all(np.linalg.norm(P[others] - c, axis=1) >= r - margin)


def test_three_points_one_triangle():
    tris = delaunay_triangulate([[0, 0], [1, 0], [0, 1]])
    np.testing.assert_array_equal(tris, [[0, 1, 2]])


def test_unit_square_tie_break():
    tris = delaunay_triangulate([[0, 0], [1, 0], [1, 1], [0, 1]])
    np.testing.assert_array_equal(tris, [[0, 1, 2], [0, 2, 3]])


def test_delaunay_random_50_points():
    rng = np.random.default_rng(0)
    P = rng.random((50, 2))
    check_delaunay(P, delaunay_triangulate(P))


def test_delaunay_regular_grid_counts():
    xs, ys = np.meshgrid(np.arange(9.0), np.arange(5.0))
    P = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    tris = delaunay_triangulate(P)
    assert len(tris) == 2 * 8 * 4
    check_delaunay(P, tris)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**31))
def test_delaunay_property(n, seed):
    P = np.random.default_rng(seed).uniform(-3, 3, size=(n, 2))
    area = _hull_area(P)
    if area < 1e-3:
        return
    check_delaunay(P, delaunay_triangulate(P))


@pytest.mark.parametrize("pts", [[[0, 0], [1, 1]], [[0, 0], [1, 1], [2, 2], [3, 3]], [[0, 0], [1, 0], [1, 0], [0, 1]]])
def test_delaunay_rejects_bad_input(pts):
    with pytest.raises(ValueError):
        delaunay_triangulate(pts)
