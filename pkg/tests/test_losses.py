import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapnerf.field import VoxelRadianceField, render_rays, sample_rays
from mapnerf.geometry import Ray
from mapnerf.losses import (
    CERTAIN,
    GROUND,
    UNCERTAIN,
    gamma_confidence,
    lane_weight,
    loss_depth_smooth,
    loss_ground_density,
    loss_rgb,
    loss_view_consistency,
    region_partition,
    sample_warped_ray,
    warp_rays,
)

from conftest import random_field
from gradcheck import CASES, fd_mismatches


def test_rgb_examples():
    v, g = loss_rgb([0.3, 0.2, 0.1], [0.3, 0.2, 0.1])
    assert v == 0.0 and not np.any(g)
    v, g = loss_rgb(np.array([0.6, 0.5, 0.5]), np.array([0.5, 0.5, 0.5]))
    assert v == pytest.approx(0.01, abs=1e-15)
    np.testing.assert_allclose(g, [0.2, 0.0, 0.0], atol=1e-15)
    rng = np.random.default_rng(0)
    c, gt = rng.random((7, 3)), rng.random((7, 3))
    vals, _ = loss_rgb(c, gt)
    assert vals.mean() == pytest.approx(np.mean([loss_rgb(c[i], gt[i])[0] for i in range(7)]), rel=1e-15)


def test_region_partition_closed_ground_interval():
    t = np.array([0.5, 0.75, 1.0, 1.25, 1.5])
    lab = region_partition(t, 1.0, 0.25)
    assert list(lab) == [UNCERTAIN, GROUND, GROUND, GROUND, CERTAIN]


def _grid(n=200, far=4.0):
    w = far / n
    t = (np.arange(n) + 0.5) * w
    return t, np.full(n, w)


def test_gd_concentrated_mass():
    t, delta = _grid()
    D, eps = 2.0, 0.2
    k = int(np.argmin(np.abs(t - D)))
    h = np.zeros_like(t)
    h[k] = 0.9
    v, _, has = loss_ground_density(h, t, delta, D, eps)
    assert has
    lab = region_partition(t, D, eps)
    w = np.exp(-((t - D) ** 2) / (2 * eps**2)) * delta * (lab == GROUND)
    w /= w.sum()
    expect = -(w * np.log(np.where(lab == GROUND, h, 0.0) + 1e-8)).sum()
    assert v == pytest.approx(expect, rel=1e-12)


def test_gd_zero_beyond_has_no_certain_term():
    t, delta = _grid()
    lab = region_partition(t, 2.0, 0.2)
    h = np.where(lab == GROUND, 0.02, 0.0)
    v1, _, _ = loss_ground_density(h, t, delta, 2.0, 0.2)
    h2 = h.copy()
    h2[lab == UNCERTAIN] = 0.3
    v2, _, _ = loss_ground_density(h2, t, delta, 2.0, 0.2)
    assert v1 == v2


def test_gd_shifted_mass_costs_more():
    t, delta = _grid()
    D, eps = 2.0, 0.2

    def bump(c):
        h = np.exp(-((t - c) ** 2) / (2 * 0.05**2))
        return 0.9 * h / h.sum()

    v_c, _, _ = loss_ground_density(bump(D), t, delta, D, eps)
    v_s, _, _ = loss_ground_density(bump(D + 2 * eps), t, delta, D, eps)
    assert v_s > v_c


def test_gd_skips_rays_without_ground_samples():
    t, delta = _grid(50, 2.0)
    v, g, has = loss_ground_density(np.full(50, 0.01), t, delta, 5.0, 0.1)
    assert not has and v == 0.0 and not np.any(g)
    with pytest.raises(ValueError):
        loss_ground_density(np.full(50, 0.01), t, delta, 1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_gd_invariant_to_uncertain_mutation(seed):
    rng = np.random.default_rng(seed)
    t, delta = _grid(64, 3.0)
    D = rng.uniform(0.5, 2.5)
    eps = rng.uniform(0.05, 0.4)
    h = rng.dirichlet(np.ones(65))[:64]
    v, g, _ = loss_ground_density(h, t, delta, D, eps)
    lab = region_partition(t, D, eps)
    h2 = h.copy()
    h2[lab == UNCERTAIN] = rng.random((lab == UNCERTAIN).sum())
    v2, g2, _ = loss_ground_density(h2, t, delta, D, eps)
    assert v == v2
    np.testing.assert_array_equal(g, g2)


def test_gd_batch_equals_single():
    rng = np.random.default_rng(1)
    t, delta = _grid(32, 3.0)
    H = rng.dirichlet(np.ones(33), size=5)[:, :32]
    D = rng.uniform(0.5, 2.5, 5)
    vb, gb, _ = loss_ground_density(H, np.tile(t, (5, 1)), np.tile(delta, (5, 1)), D, 0.2)
    for i in range(5):
        v, g, _ = loss_ground_density(H[i], t, delta, D[i], 0.2)
        assert vb[i] == v
        np.testing.assert_array_equal(gb[i], g)


def test_depth_smooth_examples():
    assert loss_depth_smooth([2.0, 2.0, 2.0, 2.0])[0] == 0.0
    v, g = loss_depth_smooth([1.0, 1.0, 1.0, 2.0])
    assert v == 2.0
    np.testing.assert_array_equal(g, [0.0, -1.0, -1.0, 2.0])
    _, g_tie = loss_depth_smooth([1.0, 1.0, 1.0, 1.0])
    assert not np.any(g_tie)


def test_depth_smooth_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = rng.normal(size=4)
        _, g = loss_depth_smooth(d)
        for k in range(4):
            e = np.zeros(4)
            e[k] = 1e-6
            num = (loss_depth_smooth(d + e)[0] - loss_depth_smooth(d - e)[0]) / 2e-6
            assert num == pytest.approx(g[k], abs=1e-8)


def test_gamma_examples():
    assert gamma_confidence(3.0, 3.0, 0.1) == 1.0
    assert gamma_confidence(3.2, 3.0, 0.1) == pytest.approx(math.exp(-1), rel=1e-12)
    assert gamma_confidence(2.7, 3.0, 0.3) == pytest.approx(math.exp(-0.5), rel=1e-12)
    errs = np.linspace(0, 2, 20)
    g = gamma_confidence(3.0 + errs, 3.0, 0.2)
    assert np.all(np.diff(g) < 0) and np.all((g > 0) & (g <= 1))
    assert gamma_confidence(3.5, 3.0, 0.3) > gamma_confidence(3.5, 3.0, 0.2)
    with pytest.raises(ValueError):
        gamma_confidence(1.0, 1.0, 0.0)


def test_lane_weight_examples():
    assert lane_weight(0.0) == 2.0
    assert lane_weight(8.0) == 1.0 and lane_weight(100.0) == 1.0
    assert lane_weight(4.0, 1.0, 8.0) == 1.5
    assert lane_weight(np.inf) == 1.0


def test_warp_worked_example():
    ray = Ray(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.6, -0.8]), 0.0, 10.0)
    pair = sample_warped_ray(ray, (3, 4), 2.5, 0.1, direction=(1.0, 0.0, 0.0))
    np.testing.assert_allclose(pair.ground_point, [0.0, 1.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(pair.origin, [0.1, 0.0, 2.0], atol=1e-15)
    v = np.array([-0.1, 1.5, -2.0])
    np.testing.assert_allclose(pair.warped.direction, v / np.linalg.norm(v), atol=1e-15)
    assert pair.warped.near == ray.near and pair.warped.far == ray.far


def test_warp_identity_and_invalid():
    ray = Ray(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.6, -0.8]), 0.0, 10.0)
    assert sample_warped_ray(ray, (0, 0), 2.5, 0.0).warped is ray
    assert sample_warped_ray(ray, (0, 0), np.nan, 0.1, np.random.default_rng(0)) is None
    assert sample_warped_ray(ray, (0, 0), -1.0, 0.1, np.random.default_rng(0)) is None


def test_warp_offset_is_horizontal():
    rng = np.random.default_rng(0)
    ray = Ray(np.array([1.0, 2.0, 2.0]), np.array([0.0, 0.6, -0.8]))
    for _ in range(50):
        pair = sample_warped_ray(ray, (0, 0), 2.0, 0.1, rng)
        off = pair.origin - ray.origin
        assert off[2] == 0.0 and abs(np.linalg.norm(off) - 0.1) < 1e-15


def test_warp_rays_vectorized_agree():
    rng = np.random.default_rng(3)
    o = rng.normal(size=(20, 3))
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    D = rng.uniform(1, 5, 20)
    ang = rng.uniform(0, 2 * np.pi, 20)
    p, o2, d2 = warp_rays(o, d, D, 0.1, ang)
    for i in range(20):
        pair = sample_warped_ray(Ray(o[i], d[i]), (0, 0), D[i], 0.1, direction=(np.cos(ang[i]), np.sin(ang[i]), 0))
        np.testing.assert_allclose(pair.warped.direction, d2[i], atol=1e-14)
        np.testing.assert_allclose(pair.origin, o2[i], atol=1e-15)


def test_view_consistency_reduces_to_rgb():
    rng = np.random.default_rng(4)
    f = random_field(rng)
    ray = Ray(np.array([-0.5, 0.0, 0.2]), np.array([1.0, 0.0, 0.0]), 0.0, 1.4)
    gt = rng.random(3)
    s = sample_rays(ray.origin, ray.direction, ray.near, ray.far, 16)
    r = render_rays(f, s)
    pair = sample_warped_ray(ray, (0, 0), 0.9, 0.0)
    v, g, _, _ = loss_view_consistency(f, pair, gt, 16, 0.1, float(r.depth[0]), source_depth=float(r.depth[0]))
    v_rgb, g_rgb = loss_rgb(r.color[0], gt)
    assert v == v_rgb
    np.testing.assert_array_equal(g, g_rgb)


def test_view_consistency_vanishes_with_gamma():
    rng = np.random.default_rng(5)
    f = random_field(rng)
    ray = Ray(np.array([-0.5, 0.0, 0.2]), np.array([1.0, 0.0, 0.0]), 0.0, 1.4)
    pair = sample_warped_ray(ray, (0, 0), 0.9, 0.1, rng)
    _, g, _, _ = loss_view_consistency(f, pair, rng.random(3), 16, 0.01, 0.9, source_depth=50.0)
    assert np.abs(g).max() < 1e-100
    assert pair.gamma < 1e-100


@pytest.mark.parametrize("name", list(CASES))
def test_loss_gradients_match_finite_differences(name):
    rng = np.random.default_rng(10)
    for _ in range(5):
        f, loss, grad = CASES[name](rng)
        n, bad = fd_mismatches(f, loss, grad)
        assert n == 4 * f.n_nodes
        assert not bad, bad[:3]
