"""Kernel-match metrics and standard monocular-depth error metrics.

Kernel RMSE/MAE are computed after normalizing both inputs to unit L2 norm,
making them scale-free and comparable across kernels of very different
magnitudes (a realized PSF and a CNN kernel differ by an arbitrary gain).
NCC is zero-mean normalized cross correlation and is invariant to positive
affine rescaling of either argument on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "KernelMatchReport",
    "DepthMetricReport",
    "kernel_metrics",
    "layer_metrics",
    "depth_metrics",
]


@dataclass(frozen=True)
class KernelMatchReport:
    ncc: float
    rmse: float
    mae: float


@dataclass(frozen=True)
class DepthMetricReport:
    absrel: float
    sqrel: float
    rmse_m: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float


def _unit_l2(x: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    return x if norm == 0.0 else x / norm


def kernel_metrics(realized: np.ndarray, target: np.ndarray) -> KernelMatchReport:
    """Compare a realized kernel against a target of the same shape.

    A constant target (or realized pattern) has no NCC; the report carries
    ``nan`` there while RMSE/MAE are still computed.
    """
    realized = np.asarray(realized, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if realized.shape != target.shape:
        raise ValidationError(
            f"shape mismatch: realized {realized.shape} vs target {target.shape}"
        )

    a = realized - realized.mean()
    b = target - target.mean()
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    ncc = float(np.vdot(a, b).real / denom) if denom > 0.0 else math.nan

    ra = _unit_l2(realized)
    rb = _unit_l2(target)
    diff = ra - rb
    rmse = float(np.sqrt(np.mean(diff * diff)))
    mae = float(np.mean(np.abs(diff)))
    return KernelMatchReport(ncc=ncc, rmse=rmse, mae=mae)


def layer_metrics(reports: list[KernelMatchReport]) -> KernelMatchReport:
    """Arithmetic means across per-kernel reports."""
    if not reports:
        raise ValidationError("no reports to average")
    return KernelMatchReport(
        ncc=float(np.mean([r.ncc for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
    )


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  mask: np.ndarray | None = None) -> DepthMetricReport:
    """Standard depth-error metrics over a validity mask (KITTI conventions).

    absrel = mean |p-g|/g, sqrel = mean (p-g)^2/g, rmse = sqrt(mean (p-g)^2),
    rms_log = sqrt(mean (ln p - ln g)^2), delta_i = fraction with
    max(p/g, g/p) < 1.25^i. Depths must be strictly positive on the mask.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ValidationError(f"mask shape {mask.shape} does not match {pred.shape}")
    if not mask.any():
        raise ValidationError("mask selects no pixels")

    p = pred[mask]
    g = gt[mask]
    if p.min() <= 0 or g.min() <= 0:
        raise ValidationError("depths must be > 0 on the validity mask")

    diff = p - g
    ratio = np.maximum(p / g, g / p)
    log_diff = np.log(p) - np.log(g)
    return DepthMetricReport(
        absrel=float(np.mean(np.abs(diff) / g)),
        sqrel=float(np.mean(diff * diff / g)),
        rmse_m=float(np.sqrt(np.mean(diff * diff))),
        rms_log=float(np.sqrt(np.mean(log_diff * log_diff))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )
