"""Training loop: photometric, ground-density and view-consistency terms with
uncertainty tempering, exponential learning-rate decay and Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional

import numba
import numpy as np

from . import dataio
from .dataio import CheckpointState, Dataset
from .field import FieldGradient, SampleBatch, VoxelRadianceField, backward_rays, render_rays, sample_rays
from .losses import gamma_confidence, lane_weight, loss_depth_smooth, loss_ground_density, loss_rgb, warp_rays
from .map_prior import build_ground_mesh, render_lane_distance, render_pseudo_depth

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "StepMetrics",
    "MapProducts",
    "TrainingData",
    "METRICS_HEADER",
    "temper_uncertainty",
    "lr_schedule",
    "prepare_map_products",
    "make_field",
    "train_step",
    "train",
    "field_to_checkpoint",
    "checkpoint_to_field",
    "write_metrics",
]

METRICS_HEADER = "step,loss_total,loss_rgb,loss_gd,loss_v,epsilon,lr"


@dataclass
class TrainConfig:
    lambda_d: float = 0.2
    lambda_v: float = 0.5
    lambda_s: float = 0.01
    gamma: float = 1.0005
    epsilon0: float = 0.1
    warp_offset: float = 0.1
    lr_init: float = 2e-3
    lr_final: float = 1e-4
    max_steps: int = 5000
    rays_per_batch: int = 1024
    n_samples: int = 128
    view_fraction: float = 0.25
    lane_alpha: float = 1.0
    lane_rho: float = 8.0
    seed: int = 0
    use_gd: bool = True
    use_v: bool = True
    use_temper: bool = True
    temper_every: int = 1  # optimization steps per tempering update
    resolution: tuple[int, ...] = (96, 48, 32)
    bbox_z_below: float = 1.0
    bbox_z_above: float = 3.0
    near: float = 0.05
    stratified: bool = True
    init_density: float = -7.0
    density_lr_scale: float = 50.0
    color_lr_scale: float = 50.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    background: tuple[float, ...] = (0.62, 0.76, 0.95)
    checkpoint_every: int = 0
    val_every: int = 0

    def validate(self):
        for name in ("lambda_d", "lambda_v", "lambda_s", "lane_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1: tempering may not shrink the uncertainty")
        if not (0 < self.lr_final <= self.lr_init):
            raise ValueError("need 0 < lr_final <= lr_init")
        if self.epsilon0 <= 0:
            raise ValueError("epsilon0 must be positive")
        if self.temper_every < 1:
            raise ValueError("temper_every must be >= 1")
        if self.max_steps < 1 or self.n_samples < 2:
            raise ValueError("max_steps must be >= 1 and n_samples >= 2")
        if self.rays_per_batch < 4 or self.rays_per_batch % 4:
            raise ValueError("rays_per_batch must be a positive multiple of 4 (2x2 patches)")
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError("resolution needs 3 entries >= 2")
        if not 0 <= self.view_fraction <= 1:
            raise ValueError("view_fraction must lie in [0, 1]")
        return self


def temper_uncertainty(epsilon: float, gamma: float) -> float:
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return gamma * epsilon


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Exponential decay from lr_init at step 0 to lr_final at max_steps."""
    if not 0 <= step <= config.max_steps:
        raise ValueError(f"step {step} outside [0, {config.max_steps}]")
    return config.lr_init * (config.lr_final / config.lr_init) ** (step / config.max_steps)


@dataclass(eq=False)
class TrainState:
    step: int
    epsilon: float
    seed: int
    m_density: np.ndarray
    v_density: np.ndarray
    m_color: np.ndarray
    v_color: np.ndarray

    @classmethod
    def initial(cls, config: TrainConfig, field: VoxelRadianceField) -> "TrainState":
        return cls(0, float(config.epsilon0), int(config.seed),
                   np.zeros_like(field.density), np.zeros_like(field.density),
                   np.zeros_like(field.color), np.zeros_like(field.color))


@dataclass
class StepMetrics:
    step: int
    loss_total: float
    loss_rgb: float
    loss_gd: float
    loss_v: float
    epsilon: float
    lr: float
    gd_rays: int = 0
    gd_skipped: int = 0
    v_rays: int = 0

    def csv_row(self) -> str:
        vals = (self.loss_total, self.loss_rgb, self.loss_gd, self.loss_v, self.epsilon, self.lr)
        return ",".join([str(self.step)] + [repr(float(v)) for v in vals])


@dataclass(eq=False)
class MapProducts:
    """Per training frame: map depth (NaN where the ray misses the map mesh) and lane distance."""

    pseudo_depth: np.ndarray  # (F, H, W)
    lane_distance: np.ndarray  # (F, H, W)


def prepare_map_products(dataset: Dataset, frame_ids, cache_dir=None) -> MapProducts:
    """Render pseudo depth and lane distance for each frame, cached as PFM when ``cache_dir`` is set.

    Depth is rounded to float32 whether freshly computed or read back from
    the cache, so cached and uncached runs train identically.
    """
    mesh = None
    depths, lanes = [], []
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for fid in frame_ids:
        i = dataset.index(fid)
        pd_path = cache / f"pgt_{fid:06d}.pfm" if cache else None
        ld_path = cache / f"lane_{fid:06d}.pfm" if cache else None
        if cache and pd_path.exists() and ld_path.exists():
            d = dataio.read_pfm(pd_path).astype(np.float64)
            d[d < 0] = np.nan
            lanes.append(dataio.read_pfm(ld_path).astype(np.float64))
            depths.append(d)
            continue
        if mesh is None:
            mesh = build_ground_mesh(dataset.height_map)
        cam = dataset.camera(i)
        pd = render_pseudo_depth(mesh, cam)
        d = np.where(pd.valid, pd.depth, -1.0).astype(np.float32)
        ld = render_lane_distance(dataset.lanes, cam).distance.astype(np.float32)
        if cache:
            dataio.write_pfm(pd_path, d)
            dataio.write_pfm(ld_path, ld)
        d = d.astype(np.float64)
        d[d < 0] = np.nan
        depths.append(d)
        lanes.append(ld.astype(np.float64))
    return MapProducts(np.array(depths), np.array(lanes))


@dataclass(eq=False)
class TrainingData:
    """Flattened per-pixel training arrays for the selected frames."""

    frame_ids: list
    height: int
    width: int
    colors: np.ndarray  # (F, H*W, 3)
    origins: np.ndarray  # (F, 3)
    directions: np.ndarray  # (F, H*W, 3)
    near: np.ndarray  # (F, H*W)
    far: np.ndarray
    pseudo_depth: np.ndarray  # (F, H*W)
    lane_distance: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset, frame_ids, products: MapProducts, field: VoxelRadianceField,
              near: float) -> "TrainingData":
        cols, origs, dirs, nears, fars = [], [], [], [], []
        for fid in frame_ids:
            i = dataset.index(fid)
            cam = dataset.camera(i)
            o, d = cam.pixel_rays()
            n, f = field.ray_bounds(o, d, near)
            cols.append(dataset.image(i).reshape(-1, 3))
            origs.append(cam.position)
            dirs.append(d)
            nears.append(n)
            fars.append(f)
        _, h, w = products.pseudo_depth.shape
        return cls(list(frame_ids), h, w, np.array(cols), np.array(origs), np.array(dirs), np.array(nears),
                   np.array(fars), products.pseudo_depth.reshape(len(frame_ids), -1),
                   products.lane_distance.reshape(len(frame_ids), -1))


def make_field(config: TrainConfig, dataset: Dataset) -> VoxelRadianceField:
    nodes = dataset.height_map.nodes
    lo = nodes.min(axis=0)
    hi = nodes.max(axis=0)
    bmin = np.array([lo[0], lo[1], lo[2] - config.bbox_z_below])
    bmax = np.array([hi[0], hi[1], hi[2] + config.bbox_z_above])
    f = VoxelRadianceField(bmin, bmax, config.resolution, background=config.background,
                           init_density=config.init_density)
    _round_f32(f)
    return f


def _round_f32(field: VoxelRadianceField) -> None:
    field.density[:] = field.density.astype(np.float32)
    field.color[:] = field.color.astype(np.float32)


@numba.njit(cache=True)
def _adam(param, grad, m, v, lr, b1, b2, eps, bc1, bc2):
    for j in range(param.size):
        g = grad.flat[j]
        mj = b1 * m.flat[j] + (1.0 - b1) * g
        vj = b2 * v.flat[j] + (1.0 - b2) * g * g
        m.flat[j] = mj
        v.flat[j] = vj
        p = param.flat[j] - lr * (mj / bc1) / (np.sqrt(vj / bc2) + eps)
        # parameters are kept float32-representable so checkpoints round-trip exactly
        param.flat[j] = np.float64(np.float32(p))


def _check_finite(name: str, values: np.ndarray, step: int) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        k = int(np.argmax(bad.reshape(len(values), -1).any(axis=1)))
        raise FloatingPointError(f"non-finite {name} loss at step {step}, ray {k}")


def train_step(state: TrainState, field: VoxelRadianceField, data: TrainingData, config: TrainConfig,
               grad: Optional[FieldGradient] = None) -> StepMetrics:
    """One optimization step on a deterministic batch of 2x2 pixel patches."""
    step = state.step
    rng = np.random.default_rng([state.seed, step])
    eps = state.epsilon
    lr = lr_schedule(min(step, config.max_steps), config)
    n_patch = config.rays_per_batch // 4
    F, H, W = len(data.frame_ids), data.height, data.width

    fi = rng.integers(F, size=n_patch)
    u = rng.integers(W - 1, size=n_patch)
    v = rng.integers(H - 1, size=n_patch)
    pix = np.stack([v * W + u, v * W + u + 1, (v + 1) * W + u, (v + 1) * W + u + 1], axis=1).ravel()
    fr = np.repeat(fi, 4)
    samples = sample_rays(data.origins[fr], data.directions[fr, pix], data.near[fr, pix], data.far[fr, pix],
                          config.n_samples, config.stratified, rng)
    gt = data.colors[fr, pix]
    d_pgt = data.pseudo_depth[fr, pix]
    R = len(pix)

    render = render_rays(field, samples)
    rgb_val, rgb_grad = loss_rgb(render.color, gt)
    _check_finite("rgb", rgb_val, step)
    loss_rgb_mean = float(rgb_val.mean())
    d_color = rgb_grad / R
    d_depth = np.zeros(R)
    d_weights = np.zeros_like(render.weights)

    loss_gd_val = 0.0
    gd_rays = gd_skipped = 0
    if config.use_gd:
        valid = np.isfinite(d_pgt)
        gd_val, gd_grad, has = loss_ground_density(render.weights, samples.t, samples.delta,
                                                   np.where(valid, d_pgt, np.inf), eps)
        _check_finite("ground-density", gd_val, step)
        gd_rays = int(has.sum())
        gd_skipped = int(valid.sum()) - gd_rays
        if gd_rays:
            loss_gd_val = float(gd_val[has].mean())
            d_weights += config.lambda_d * gd_grad * (has / gd_rays)[:, None]
        patch_valid = valid.reshape(-1, 4).all(axis=1)
        if patch_valid.any() and config.lambda_s > 0:
            sm_val, sm_grad = loss_depth_smooth(render.depth.reshape(-1, 4))
            _check_finite("depth-smoothness", sm_val, step)
            n_p = int(patch_valid.sum())
            loss_gd_val += config.lambda_s * float(sm_val[patch_valid].mean())
            d_depth += (config.lambda_d * config.lambda_s / n_p * sm_grad * patch_valid[:, None]).ravel()

    loss_v_val = 0.0
    v_rays = 0
    warped = None
    if config.use_v:
        cand = np.flatnonzero(np.isfinite(d_pgt))
        n_v = min(int(config.view_fraction * R), len(cand))
        if n_v:
            src = np.sort(rng.permutation(cand)[:n_v])
            angles = rng.uniform(0.0, 2.0 * np.pi, size=n_v)
            _, o2, d2 = warp_rays(samples.origins[src], samples.directions[src], d_pgt[src],
                                  config.warp_offset, angles)
            wsamp = sample_rays(o2, d2, samples.near[src], samples.far[src], config.n_samples,
                                config.stratified, rng)
            wrender = render_rays(field, wsamp)
            gamma = gamma_confidence(render.depth[src], d_pgt[src], eps)
            w_lane = lane_weight(data.lane_distance[fr[src], pix[src]], config.lane_alpha, config.lane_rho)
            val, g = loss_rgb(wrender.color, gt[src])
            scale = gamma * w_lane
            _check_finite("view-consistency", scale * val, step)
            loss_v_val = float((scale * val).mean())
            v_rays = n_v
            warped = (wsamp, wrender, config.lambda_v * scale[:, None] * g / n_v)

    total = loss_rgb_mean + config.lambda_d * loss_gd_val + config.lambda_v * loss_v_val
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite total loss at step {step}")

    if grad is None:
        grad = FieldGradient.zeros_like(field)
    else:
        grad.zero()
    backward_rays(field, samples, render, grad, d_color, d_depth, d_weights)
    if warped is not None:
        backward_rays(field, warped[0], warped[1], grad, warped[2])

    t = step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    _adam(field.density, grad.density, state.m_density, state.v_density, lr * config.density_lr_scale,
          b1, b2, config.adam_eps, bc1, bc2)
    _adam(field.color, grad.color, state.m_color, state.v_color, lr * config.color_lr_scale,
          b1, b2, config.adam_eps, bc1, bc2)

    metrics = StepMetrics(step, total, loss_rgb_mean, loss_gd_val, loss_v_val, eps, lr, gd_rays, gd_skipped, v_rays)
    if config.use_temper and t % config.temper_every == 0:
        state.epsilon = temper_uncertainty(state.epsilon, config.gamma)
    state.step = t
    return metrics


def field_to_checkpoint(field: VoxelRadianceField, state: Optional[TrainState] = None) -> CheckpointState:
    ck = CheckpointState(field.bbox_min, field.bbox_max, field.resolution, field.density, field.color,
                         field.background)
    if state is not None:
        ck.step, ck.epsilon, ck.seed = state.step, state.epsilon, state.seed
        ck.m_density, ck.v_density = state.m_density, state.v_density
        ck.m_color, ck.v_color = state.m_color, state.v_color
    return ck


def checkpoint_to_field(ck: CheckpointState) -> tuple[VoxelRadianceField, TrainState]:
    field = VoxelRadianceField(ck.bbox_min, ck.bbox_max, ck.resolution, ck.density, ck.color, ck.background)
    state = TrainState(int(ck.step), float(ck.epsilon), int(ck.seed), ck.m_density.copy(), ck.v_density.copy(),
                       ck.m_color.copy(), ck.v_color.copy())
    return field, state


def write_metrics(path, rows) -> None:
    text = METRICS_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in rows)
    dataio._atomic_write(Path(path), text.encode())


def _read_metric_lines(path, upto: int) -> list:
    p = Path(path)
    if not p.exists():
        return []
    lines = p.read_text().splitlines()[1:]
    return [ln for ln in lines if ln and int(ln.split(",", 1)[0]) < upto]


def train(config: TrainConfig, dataset: Dataset, products: Optional[MapProducts] = None, out_dir=None,
          resume: Optional[tuple] = None, stop_after: Optional[int] = None,
          validate: Optional[Callable] = None):
    """Run training up to ``max_steps`` (or ``stop_after``) steps.

    ``resume`` is a ``(field, state)`` pair from :func:`checkpoint_to_field`.
    With ``out_dir`` set, writes ``checkpoint.mnrf`` and ``metrics.csv`` there
    (plus ``ckpt_XXXXXX.mnrf`` every ``checkpoint_every`` steps).
    Returns ``(field, state, metrics)`` for the steps run in this call.
    """
    config.validate()
    train_ids = dataset.train_ids or list(dataset.frame_ids)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if products is None:
        products = prepare_map_products(dataset, train_ids, out / "cache" if out is not None else None)
    if resume is not None:
        field, state = resume
    else:
        field = make_field(config, dataset)
        state = TrainState.initial(config, field)
    data = TrainingData.build(dataset, train_ids, products, field, config.near)
    grad = FieldGradient.zeros_like(field)
    end = config.max_steps if stop_after is None else min(config.max_steps, stop_after)
    prior = _read_metric_lines(out / "metrics.csv", state.step) if (out is not None and resume is not None) else []

    metrics = []
    while state.step < end:
        m = train_step(state, field, data, config, grad)
        metrics.append(m)
        if m.step % 500 == 0:
            log.info("step %d loss %.5f rgb %.5f gd %.4f v %.5f eps %.4f lr %.2e", m.step, m.loss_total,
                     m.loss_rgb, m.loss_gd, m.loss_v, m.epsilon, m.lr)
        if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            dataio.save_checkpoint(out / f"ckpt_{state.step:06d}.mnrf", field_to_checkpoint(field, state))
        if validate is not None and config.val_every and state.step % config.val_every == 0:
            validate(field, state)

    if out is not None:
        dataio.save_checkpoint(out / "checkpoint.mnrf", field_to_checkpoint(field, state))
        text = METRICS_HEADER + "\n" + "".join(ln + "\n" for ln in prior) + "".join(r.csv_row() + "\n" for r in metrics)
        dataio._atomic_write(out / "metrics.csv", text.encode())
    return field, state, metrics
