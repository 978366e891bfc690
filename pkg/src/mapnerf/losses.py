"""Supervision terms and their gradients with respect to render outputs.

Every loss returns its value together with the upstream gradient that
:func:`mapnerf.field.backward_rays` consumes (dL/dC, dL/dD or dL/dh).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field import SampleBatch, VoxelRadianceField, render_rays, sample_rays
from .geometry import Ray

__all__ = [
    "UNCERTAIN",
    "GROUND",
    "CERTAIN",
    "region_partition",
    "loss_rgb",
    "loss_ground_density",
    "loss_depth_smooth",
    "gamma_confidence",
    "WarpedRayPair",
    "sample_warped_ray",
    "warp_rays",
    "lane_weight",
    "loss_view_consistency",
]

UNCERTAIN, GROUND, CERTAIN = 0, 1, 2
LOG_FLOOR = 1e-8


def region_partition(t, d_pgt, eps) -> np.ndarray:
    """Label samples uncertain / ground / certain around the map depth.

    The ground interval ``|t - d_pgt| <= eps`` is closed.
    """
    t = np.asarray(t, dtype=np.float64)
    d = np.asarray(d_pgt, dtype=np.float64)[..., None] if np.ndim(d_pgt) else float(d_pgt)
    labels = np.full(t.shape, GROUND, dtype=np.int8)
    labels[t < d - eps] = UNCERTAIN
    labels[t > d + eps] = CERTAIN
    return labels


def loss_rgb(color, gt):
    """Squared color error per ray and its gradient 2 (C - C_gt)."""
    diff = np.asarray(color, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return (diff * diff).sum(axis=-1), 2.0 * diff


def loss_ground_density(weights, t, delta, d_pgt, eps, eta: float = LOG_FLOOR):
    """Ground-density term per ray.

    Ground samples carry a normalized Gaussian kernel ``w_i`` and contribute
    ``-w_i log(h_i + eta)``; certain samples contribute ``h_i^2 delta_i``;
    uncertain samples contribute nothing. Works on a single ray (1D inputs)
    or a batch ((R, N) inputs, (R,) depths).

    Returns ``(value, dL/dh, has_ground)``; rays without ground samples get
    value 0, zero gradient and ``has_ground = False``.
    """
    h = np.asarray(weights, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    d = np.atleast_1d(np.asarray(d_pgt, dtype=np.float64))
    if not eps > 0:
        raise ValueError("uncertainty must be positive")

    labels = region_partition(t, d, eps)
    ground = labels == GROUND
    certain = labels == CERTAIN
    kernel = np.where(ground, np.exp(-((t - d[:, None]) ** 2) / (2.0 * eps * eps)) * delta, 0.0)
    norm = kernel.sum(axis=1)
    has_ground = (norm > 0) & np.isfinite(d)
    w = kernel / np.where(has_ground, norm, 1.0)[:, None]

    value = (w * -np.log(np.where(ground, h, 1.0) + eta)).sum(axis=1) + np.where(certain, h * h * delta, 0.0).sum(axis=1)
    grad = np.where(ground, -w / (h + eta), 0.0) + np.where(certain, 2.0 * h * delta, 0.0)
    value = np.where(has_ground, value, 0.0)
    grad = np.where(has_ground[:, None], grad, 0.0)
    if single:
        return float(value[0]), grad[0], bool(has_ground[0])
    return value, grad, has_ground


def loss_depth_smooth(depths):
    """Total variation over 2x2 patches ordered (u,v), (u+1,v), (u,v+1), (u+1,v+1).

    ``depths`` is (4,) or (P, 4); returns (value, dL/dD) with zero subgradient at ties.
    """
    d = np.asarray(depths, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    pairs = ((1, 0), (2, 0), (3, 1), (3, 2))
    value = np.zeros(len(d))
    grad = np.zeros_like(d)
    for a, b in pairs:
        diff = d[:, a] - d[:, b]
        value += np.abs(diff)
        s = np.sign(diff)
        grad[:, a] += s
        grad[:, b] -= s
    if single:
        return float(value[0]), grad[0]
    return value, grad


def gamma_confidence(depth, d_pgt, eps):
    """exp(-|D - D_pgt| / (2 eps)); used as a constant weight."""
    if not eps > 0:
        raise ValueError("uncertainty must be positive")
    return np.exp(-np.abs(np.asarray(depth, dtype=np.float64) - d_pgt) / (2.0 * eps))


def lane_weight(d_px, alpha: float = 1.0, rho: float = 8.0):
    """Truncated-linear boost near lanes: 1 + alpha * max(0, 1 - d/rho)."""
    d = np.asarray(d_px, dtype=np.float64)
    return 1.0 + alpha * np.maximum(0.0, 1.0 - d / rho)


@dataclass(eq=False)
class WarpedRayPair:
    source: Ray
    pixel: tuple
    ground_point: np.ndarray
    origin: np.ndarray
    warped: Ray
    gamma: float = 1.0
    lane_weight: float = 1.0


def warp_rays(origins, directions, d_pgt, offset: float, angles):
    """Vectorized warp: ground points, perturbed origins and unit directions toward them."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    p = o + np.asarray(d_pgt, dtype=np.float64)[..., None] * d
    ang = np.asarray(angles, dtype=np.float64)
    u = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=-1)
    o2 = o + offset * u
    v = p - o2
    return p, o2, v / np.linalg.norm(v, axis=-1, keepdims=True)


def sample_warped_ray(ray: Ray, pixel, d_pgt: float, offset: float = 0.1,
                      rng: Optional[np.random.Generator] = None, direction=None) -> Optional[WarpedRayPair]:
    """Perturb the origin by ``offset`` meters along a random horizontal unit vector
    and aim the new ray at the map ground point ``o + d_pgt * d``.

    ``direction`` overrides the random horizontal unit vector. Returns None
    when the map depth is invalid.
    """
    if d_pgt is None or not np.isfinite(d_pgt) or d_pgt <= 0:
        return None
    p = ray.origin + d_pgt * ray.direction
    if offset == 0.0:
        return WarpedRayPair(ray, tuple(pixel), p, ray.origin.copy(), ray)
    if direction is None:
        if rng is None:
            raise ValueError("need an rng or an explicit offset direction")
        a = rng.uniform(0.0, 2.0 * np.pi)
        u = np.array([np.cos(a), np.sin(a), 0.0])
    else:
        u = np.asarray(direction, dtype=np.float64)
        u = u / np.linalg.norm(u)
    o2 = ray.origin + offset * u
    v = p - o2
    return WarpedRayPair(ray, tuple(pixel), p, o2, Ray(o2, v / np.linalg.norm(v), ray.near, ray.far))


def loss_view_consistency(field: VoxelRadianceField, pair: WarpedRayPair, gt, n_samples: int, eps: float,
                          d_pgt: float, stratified: bool = False, rng=None, lane_w: float = 1.0,
                          source_depth: Optional[float] = None):
    """Weighted color loss of the warped ray against the source pixel color.

    Returns ``(value, d_color, warped_samples, warped_render)``; the gradient
    flows only through the warped render, the confidence weight is constant.
    """
    if source_depth is None:
        src = sample_rays(pair.source.origin, pair.source.direction, pair.source.near, pair.source.far, n_samples)
        source_depth = float(render_rays(field, src).depth[0])
    gamma = float(gamma_confidence(source_depth, d_pgt, eps))
    w = pair.warped
    samples: SampleBatch = sample_rays(w.origin, w.direction, w.near, w.far, n_samples, stratified, rng)
    render = render_rays(field, samples)
    value, grad = loss_rgb(render.color[0], gt)
    scale = lane_w * gamma
    pair.gamma, pair.lane_weight = gamma, lane_w
    return float(scale * value), scale * grad, samples, render
