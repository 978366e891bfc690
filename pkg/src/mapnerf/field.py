"""Dense voxel radiance field with volume rendering and an analytic adjoint.

Raw parameters live on grid nodes and are trilinearly interpolated before the
activations: ``sigma = softplus(raw_density)`` and ``rgb = logistic(raw_color)``.
Color is view independent. Rendering uses

    h_i   = T_i * (1 - exp(-sigma_i * delta_i)),   T_1 = 1
    C     = sum_i h_i c_i + T_{N+1} * background
    D     = near + sum_i h_i * sum_{j<=i} delta_j

so depth is measured from the ray origin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .geometry import Camera, Ray

__all__ = [
    "VoxelRadianceField",
    "FieldGradient",
    "RaySampleSet",
    "SampleBatch",
    "RayRender",
    "RenderBatch",
    "query",
    "sample_ray",
    "sample_rays",
    "render_ray",
    "render_rays",
    "render_image",
    "backward_ray",
    "backward_rays",
    "softplus",
    "logistic",
]


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class VoxelRadianceField:
    """Raw parameters on an (nx, ny, nz) node grid spanning ``bbox``.

    Nodes are stored flat with x varying fastest: ``index = (k*ny + j)*nx + i``.
    """

    def __init__(self, bbox_min, bbox_max, resolution, density=None, color=None,
                 background=(0.0, 0.0, 0.0), init_density: float = -7.0, init_color: float = 0.0):
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).copy()
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).copy()
        self.resolution = tuple(int(r) for r in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError("resolution must have at least 2 nodes per axis")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("empty bounding box")
        n = self.n_nodes
        self.density = (np.full(n, init_density) if density is None
                        else np.ascontiguousarray(density, dtype=np.float64).reshape(n).copy())
        self.color = (np.full((n, 3), init_color) if color is None
                      else np.ascontiguousarray(color, dtype=np.float64).reshape(n, 3).copy())
        self.background = np.asarray(background, dtype=np.float64).copy()

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def res_array(self) -> np.ndarray:
        return np.array(self.resolution, dtype=np.int64)

    def copy(self) -> "VoxelRadianceField":
        return VoxelRadianceField(self.bbox_min, self.bbox_max, self.resolution,
                                  self.density, self.color, self.background)

    def node_index(self, i: int, j: int, k: int) -> int:
        nx, ny, _ = self.resolution
        return (k * ny + j) * nx + i

    def node_position(self, i: int, j: int, k: int) -> np.ndarray:
        step = (self.bbox_max - self.bbox_min) / (np.array(self.resolution) - 1)
        return self.bbox_min + step * np.array([i, j, k])

    def ray_bounds(self, origins, directions, near: float = 0.0, max_far: float = np.inf):
        """Clip rays to the bounding box: returns (near, far) per ray.

        Rays missing the box get ``far = near + 1e-6``; they render background.
        """
        o = np.atleast_2d(origins)
        d = np.atleast_2d(directions)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.bbox_min - o) * inv
            t1 = (self.bbox_max - o) * inv
        lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
        hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
        n = np.maximum(lo, near)
        f = np.minimum(hi, max_far)
        f = np.where(f > n, f, n + 1e-6)
        return n, f


@dataclass(eq=False)
class FieldGradient:
    density: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros_like(cls, field: VoxelRadianceField) -> "FieldGradient":
        return cls(np.zeros_like(field.density), np.zeros_like(field.color))

    def zero(self) -> None:
        self.density[:] = 0.0
        self.color[:] = 0.0


# --- numba kernels ------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _softplus(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@numba.njit(cache=True, inline="always")
def _logistic(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True, inline="always")
def _cell(px, py, pz, bmin, scale, res):
    """Base node index and fractional offsets; base = -1 outside the grid."""
    gx = (px - bmin[0]) * scale[0]
    gy = (py - bmin[1]) * scale[1]
    gz = (pz - bmin[2]) * scale[2]
    nx, ny, nz = res[0], res[1], res[2]
    if not (gx >= 0.0 and gy >= 0.0 and gz >= 0.0 and gx <= nx - 1 and gy <= ny - 1 and gz <= nz - 1):
        return -1, 0.0, 0.0, 0.0
    ix = min(int(gx), nx - 2)
    iy = min(int(gy), ny - 2)
    iz = min(int(gz), nz - 2)
    return (iz * ny + iy) * nx + ix, gx - ix, gy - iy, gz - iz


@numba.njit(cache=True, error_model="numpy", parallel=True)
def _render_kernel(density, color, bmin, scale, res, bg, O, D, T, delta, near):
    R, N = T.shape
    nx, nxy = res[0], res[0] * res[1]
    rgb = np.zeros((R, 3))
    depth = np.zeros(R)
    h = np.zeros((R, N))
    trans = np.zeros((R, N + 1))
    sig = np.zeros((R, N))
    col = np.zeros((R, N, 3))
    for r in numba.prange(R):
        Tcur = 1.0
        s = 0.0
        acc_d = 0.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for i in range(N):
            t = T[r, i]
            base, fx, fy, fz = _cell(O[r, 0] + t * D[r, 0], O[r, 1] + t * D[r, 1], O[r, 2] + t * D[r, 2],
                                     bmin, scale, res)
            trans[r, i] = Tcur
            s += delta[r, i]
            if base < 0:
                col[r, i, 0] = bg[0]
                col[r, i, 1] = bg[1]
                col[r, i, 2] = bg[2]
                continue
            p = 0.0
            q0 = 0.0
            q1 = 0.0
            q2 = 0.0
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                idx = base + ox + oy * nx + oz * nxy
                p += w * density[idx]
                q0 += w * color[idx, 0]
                q1 += w * color[idx, 1]
                q2 += w * color[idx, 2]
            sg = _softplus(p)
            c0, c1, c2 = _logistic(q0), _logistic(q1), _logistic(q2)
            sig[r, i] = sg
            col[r, i, 0] = c0
            col[r, i, 1] = c1
            col[r, i, 2] = c2
            a = np.exp(-sg * delta[r, i])
            hi = Tcur * (1.0 - a)
            h[r, i] = hi
            cr += hi * c0
            cg += hi * c1
            cb += hi * c2
            acc_d += hi * s
            Tcur = Tcur * a
        trans[r, N] = Tcur
        rgb[r, 0] = cr + Tcur * bg[0]
        rgb[r, 1] = cg + Tcur * bg[1]
        rgb[r, 2] = cb + Tcur * bg[2]
        depth[r] = near[r] + acc_d
    return rgb, depth, h, trans, sig, col


@numba.njit(cache=True, error_model="numpy")
def _backward_kernel(density, color, bmin, scale, res, bg, O, D, T, delta, h, trans, col,
                     gC, gD, gH, grad_density, grad_color):
    """Accumulate dL/draw for every ray, strictly in ray order (deterministic)."""
    R, N = T.shape
    nx, nxy = res[0], res[0] * res[1]
    gh = np.empty(N)
    for r in range(R):
        gT = gC[r, 0] * bg[0] + gC[r, 1] * bg[1] + gC[r, 2] * bg[2]
        s = 0.0
        for i in range(N):
            s += delta[r, i]
            gh[i] = gH[r, i] + gC[r, 0] * col[r, i, 0] + gC[r, 1] * col[r, i, 1] + gC[r, 2] * col[r, i, 2] + gD[r] * s
        Tend = trans[r, N]
        # suffix = sum_{i>k} gh_i h_i + gT * T_{N+1}
        suffix = gT * Tend
        for k in range(N - 1, -1, -1):
            dsig = delta[r, k] * (gh[k] * trans[r, k + 1] - suffix)
            suffix += gh[k] * h[r, k]
            hk = h[r, k]
            if dsig == 0.0 and hk == 0.0:
                continue
            t = T[r, k]
            base, fx, fy, fz = _cell(O[r, 0] + t * D[r, 0], O[r, 1] + t * D[r, 1], O[r, 2] + t * D[r, 2],
                                     bmin, scale, res)
            if base < 0:
                continue
            p = 0.0
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                p += w * density[base + ox + oy * nx + oz * nxy]
            dp = dsig * _logistic(p)
            c0, c1, c2 = col[r, k, 0], col[r, k, 1], col[r, k, 2]
            dq0 = hk * gC[r, 0] * c0 * (1.0 - c0)
            dq1 = hk * gC[r, 1] * c1 * (1.0 - c1)
            dq2 = hk * gC[r, 2] * c2 * (1.0 - c2)
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                idx = base + ox + oy * nx + oz * nxy
                grad_density[idx] += w * dp
                grad_color[idx, 0] += w * dq0
                grad_color[idx, 1] += w * dq1
                grad_color[idx, 2] += w * dq2


# --- samples and renders -----------------------------------------------------------


@dataclass(eq=False)
class SampleBatch:
    """Samples for R rays: ``t`` and ``delta`` are (R, N)."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    t: np.ndarray
    delta: np.ndarray

    def __len__(self):
        return len(self.t)

    def select(self, idx) -> "SampleBatch":
        return SampleBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx],
                           self.t[idx], self.delta[idx])

    @staticmethod
    def concat(batches) -> "SampleBatch":
        return SampleBatch(*(np.concatenate([getattr(b, k) for b in batches])
                             for k in ("origins", "directions", "near", "far", "t", "delta")))


@dataclass(eq=False)
class RaySampleSet:
    ray: Ray
    t: np.ndarray
    delta: np.ndarray

    def as_batch(self) -> SampleBatch:
        return SampleBatch(self.ray.origin[None], self.ray.direction[None], np.array([self.ray.near]),
                           np.array([self.ray.far]), self.t[None], self.delta[None])


def sample_rays(origins, directions, near, far, n_samples: int, stratified: bool = False,
                rng: Optional[np.random.Generator] = None, last_delta: Optional[float] = None) -> SampleBatch:
    """One sample per uniform bin over [near, far].

    Bin midpoints, or a uniform jitter inside each bin when ``stratified``.
    ``delta`` is the gap to the next sample; the last gap is ``last_delta``
    (default: the bin width).
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    R = len(d)
    o = np.broadcast_to(o, d.shape).copy()
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,)).copy()
    width = (far - near) / n_samples
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((R, n_samples))
    else:
        u = np.full((R, n_samples), 0.5)
    t = near[:, None] + width[:, None] * (np.arange(n_samples)[None, :] + u)
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = width if last_delta is None else last_delta
    return SampleBatch(o, d, near, far, t, delta)


def sample_ray(ray: Ray, n_samples: int, stratified: bool = False,
               rng: Optional[np.random.Generator] = None) -> RaySampleSet:
    if not np.isfinite(ray.far):
        raise ValueError("sampling needs a finite far bound")
    b = sample_rays(ray.origin, ray.direction, ray.near, ray.far, n_samples, stratified, rng)
    return RaySampleSet(ray, b.t[0], b.delta[0])


@dataclass(eq=False)
class RenderBatch:
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    weights: np.ndarray  # h, (R, N)
    transmittance: np.ndarray  # (R, N+1)
    sigma: np.ndarray  # (R, N)
    rgb: np.ndarray  # (R, N, 3)

    def __len__(self):
        return len(self.color)


@dataclass(eq=False)
class RayRender:
    color: np.ndarray
    depth: float
    weights: np.ndarray
    transmittance: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray


def _grid_scale(field: VoxelRadianceField) -> np.ndarray:
    return (np.array(field.resolution) - 1) / (field.bbox_max - field.bbox_min)


def render_rays(field: VoxelRadianceField, samples: SampleBatch) -> RenderBatch:
    out = _render_kernel(field.density, field.color, field.bbox_min, _grid_scale(field), field.res_array,
                         field.background, np.ascontiguousarray(samples.origins),
                         np.ascontiguousarray(samples.directions), np.ascontiguousarray(samples.t),
                         np.ascontiguousarray(samples.delta), np.ascontiguousarray(samples.near))
    return RenderBatch(*out)


def render_ray(field: VoxelRadianceField, samples: RaySampleSet) -> RayRender:
    b = render_rays(field, samples.as_batch())
    return RayRender(b.color[0], float(b.depth[0]), b.weights[0], b.transmittance[0], b.sigma[0], b.rgb[0])


def backward_rays(field: VoxelRadianceField, samples: SampleBatch, render: RenderBatch, grad: FieldGradient,
                  d_color=None, d_depth=None, d_weights=None) -> None:
    """Add dL/d(raw params) for upstream dL/dC (R, 3), dL/dD (R,), dL/dh (R, N)."""
    R, N = samples.t.shape
    gC = np.zeros((R, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64)
    gD = np.zeros(R) if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    gH = np.zeros((R, N)) if d_weights is None else np.asarray(d_weights, dtype=np.float64)
    if gC.shape != (R, 3) or gD.shape != (R,) or gH.shape != (R, N):
        raise ValueError(f"upstream shapes {gC.shape}, {gD.shape}, {gH.shape} do not match {R} rays x {N} samples")
    if grad.density.shape != field.density.shape or grad.color.shape != field.color.shape:
        raise ValueError("gradient accumulator does not match the field")
    _backward_kernel(field.density, field.color, field.bbox_min, _grid_scale(field), field.res_array,
                     field.background, np.ascontiguousarray(samples.origins),
                     np.ascontiguousarray(samples.directions), np.ascontiguousarray(samples.t),
                     np.ascontiguousarray(samples.delta), render.weights, render.transmittance, render.rgb,
                     np.ascontiguousarray(gC), np.ascontiguousarray(gD), np.ascontiguousarray(gH),
                     grad.density, grad.color)


def backward_ray(field: VoxelRadianceField, samples: RaySampleSet, render: RayRender, grad: FieldGradient,
                 d_color=None, d_depth: float = 0.0, d_weights=None) -> None:
    batch = samples.as_batch()
    rb = RenderBatch(render.color[None], np.array([render.depth]), render.weights[None],
                     render.transmittance[None], render.sigma[None], render.rgb[None])
    N = len(samples.t)
    backward_rays(field, batch, rb, grad,
                  np.zeros((1, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64).reshape(1, 3),
                  np.array([float(d_depth)]),
                  np.zeros((1, N)) if d_weights is None else np.asarray(d_weights, dtype=np.float64).reshape(1, N))


def query(field: VoxelRadianceField, x) -> tuple[float, np.ndarray]:
    """(sigma, rgb) at a world point; outside the box: (0, background)."""
    p = np.asarray(x, dtype=np.float64)
    batch = SampleBatch(p[None], np.array([[1.0, 0.0, 0.0]]), np.zeros(1), np.ones(1),
                        np.zeros((1, 1)), np.ones((1, 1)))
    r = render_rays(field, batch)
    return float(r.sigma[0, 0]), r.rgb[0, 0].copy()


def render_image(field: VoxelRadianceField, camera: Camera, n_samples: int = 128, near: float = 0.05,
                 max_far: float = np.inf, chunk: int = 4096):
    """Deterministic midpoint-sampled render: (image (H, W, 3), depth (H, W))."""
    origins, dirs = camera.pixel_rays()
    n, f = field.ray_bounds(origins, dirs, near, max_far)
    colors, depths = [], []
    for lo in range(0, len(dirs), chunk):
        sl = slice(lo, lo + chunk)
        b = sample_rays(origins[sl], dirs[sl], n[sl], f[sl], n_samples)
        r = render_rays(field, b)
        colors.append(r.color)
        depths.append(r.depth)
    shape = (camera.height, camera.width)
    return np.concatenate(colors).reshape(shape + (3,)), np.concatenate(depths).reshape(shape)
