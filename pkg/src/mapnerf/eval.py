"""Image metrics, interpolation / extrapolation protocols and the loss ablation grid."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dataio
from .dataio import Dataset
from .field import VoxelRadianceField, render_image

log = logging.getLogger(__name__)

__all__ = [
    "psnr",
    "ssim",
    "ssim_map",
    "EvalReport",
    "eval_frames",
    "eval_interpolation",
    "eval_extrapolation",
    "ABLATION_ROWS",
    "AblationRow",
    "ablation_run",
    "write_ablation_csv",
]

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every full 11x11 Gaussian window of a 2D image pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = _gaussian_window()

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b) -> float:
    """Mean SSIM, per channel then averaged (K1=0.01, K2=0.03, range 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))


@dataclass
class EvalReport:
    protocol: str  # interpolation | extrapolation
    frame_ids: list
    psnr: list
    ssim: list

    def __len__(self):
        return len(self.frame_ids)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_csv(self) -> str:
        rows = ["frame_id,psnr_db,ssim,lpips"]
        rows += [f"{fid},{p!r},{s!r},NA" for fid, p, s in zip(self.frame_ids, self.psnr, self.ssim)]
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        dataio._atomic_write(Path(path), self.to_csv().encode())


def eval_frames(field: VoxelRadianceField, dataset: Dataset, frame_ids, protocol: str,
                n_samples: int = 128, near: float = 0.05) -> EvalReport:
    frame_ids = sorted(int(f) for f in frame_ids)
    if not frame_ids:
        raise ValueError("no frames to evaluate")
    ps, ss = [], []
    for fid in frame_ids:
        i = dataset.index(fid)
        img, _ = render_image(field, dataset.camera(i), n_samples, near)
        gt = dataset.image(i)
        ps.append(psnr(img, gt))
        ss.append(ssim(img, gt))
    return EvalReport(protocol, frame_ids, ps, ss)


def eval_interpolation(field: VoxelRadianceField, dataset: Dataset, n_samples: int = 128,
                       near: float = 0.05) -> EvalReport:
    """Render the held-out frames of the training trajectory."""
    ids = dataset.eval_ids
    if not ids:
        raise ValueError("dataset has no held-out (eval) frames")
    return eval_frames(field, dataset, ids, "interpolation", n_samples, near)


def eval_extrapolation(field: VoxelRadianceField, holdout: Dataset, train_ids: Optional[Sequence] = None,
                       n_samples: int = 128, near: float = 0.05) -> EvalReport:
    """Render off-trajectory frames; they must never have been trained on."""
    ids = holdout.eval_ids or list(holdout.frame_ids)
    seen = set(holdout.train_ids) | set(int(i) for i in (train_ids or ()))
    overlap = sorted(seen & set(ids))
    if overlap:
        raise ValueError(f"holdout frames overlap training frames: {overlap[:5]}")
    return eval_frames(field, holdout, ids, "extrapolation", n_samples, near)


# --- ablation ---------------------------------------------------------------------

# (label, use_gd, use_v, use_temper); tempering only appears with a map term
ABLATION_ROWS = (
    ("a", False, False, False),
    ("b", True, False, False),
    ("c", False, True, False),
    ("d", True, True, False),
    ("e", True, False, True),
    ("f", False, True, True),
    ("g", True, True, True),
)


@dataclass
class AblationRow:
    label: str
    use_gd: bool
    use_v: bool
    use_temper: bool
    interp: EvalReport
    extrap: EvalReport


def ablation_run(base_config, train_dataset: Dataset, extrap_dataset: Dataset, rows: str = "abcdefg",
                 out_dir=None, products=None) -> list:
    """Train and evaluate each requested ablation row under identical seeds."""
    from .trainer import prepare_map_products, train

    table = {r[0]: r for r in ABLATION_ROWS}
    unknown = set(rows) - set(table)
    if unknown:
        raise ValueError(f"unknown ablation rows {sorted(unknown)}")
    train_ids = train_dataset.train_ids or list(train_dataset.frame_ids)
    if products is None:
        cache = Path(out_dir) / "cache" if out_dir is not None else None
        products = prepare_map_products(train_dataset, train_ids, cache)
    results = []
    for label in rows:
        _, gd, v, ut = table[label]
        cfg = dataclasses.replace(base_config, use_gd=gd, use_v=v, use_temper=ut)
        sub = Path(out_dir) / f"row_{label}" if out_dir is not None else None
        field, _, _ = train(cfg, train_dataset, products, sub)
        interp = eval_interpolation(field, train_dataset, cfg.n_samples, cfg.near)
        extrap = eval_extrapolation(field, extrap_dataset, train_ids, cfg.n_samples, cfg.near)
        log.info("row (%s): interp %.3f dB / %.4f, extrap %.3f dB / %.4f", label, interp.mean_psnr,
                 interp.mean_ssim, extrap.mean_psnr, extrap.mean_ssim)
        results.append(AblationRow(label, gd, v, ut, interp, extrap))
    if out_dir is not None:
        write_ablation_csv(Path(out_dir) / "ablation.csv", results)
    return results


def write_ablation_csv(path, results) -> None:
    lines = ["row,use_gd,use_v,use_temper,interp_psnr,interp_ssim,extrap_psnr,extrap_ssim,lpips"]
    for r in results:
        lines.append(f"{r.label},{int(r.use_gd)},{int(r.use_v)},{int(r.use_temper)},"
                     f"{r.interp.mean_psnr!r},{r.interp.mean_ssim!r},{r.extrap.mean_psnr!r},{r.extrap.mean_ssim!r},NA")
    dataio._atomic_write(Path(path), ("\n".join(lines) + "\n").encode())
