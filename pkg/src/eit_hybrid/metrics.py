"""Reconstruction quality metrics over the disk nodes of the grid."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import GridSpec
from .phantoms import Phantom


@dataclass
class MetricReport:
    rmse: float
    relative_l2: float
    pearson_r: float | None
    centroid_error: float | None
    inclusion_centroid_errors: list = field(default_factory=list)
    background_mad: float | None = None
    background_within_0p1: float | None = None
    inclusion_mean: list = field(default_factory=list)
    runtime_seconds: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _centroid(points: np.ndarray, weights: np.ndarray):
    # excess over background, clipped at zero so dips below 1 do not pull the centroid
    w = np.clip(weights, 0.0, None)
    if w.sum() <= 0:
        return None
    return (points * w[:, None]).sum(0) / w.sum()


def _dist(a, b):
    if a is None or b is None:
        return None
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def compute_metrics(sigma_rec, sigma_gt, grid: GridSpec, phantom: Phantom | None = None, runtime: float | None = None) -> MetricReport:
    m = grid.mask
    rec = np.asarray(sigma_rec, dtype=float)[m]
    gt = np.asarray(sigma_gt, dtype=float)[m]
    if rec.shape != gt.shape:
        raise ValueError("fields are not aligned")
    d = rec - gt
    rmse = float(np.sqrt(np.mean(d * d)))
    rel = float(np.linalg.norm(d) / np.linalg.norm(gt))
    r = None
    if gt.std() > 0 and rec.std() > 0:
        r = float(np.clip(np.corrcoef(rec, gt)[0, 1], -1.0, 1.0))
    pts = grid.mask_points
    bg_val = phantom.background if phantom is not None else 1.0
    ce = _dist(_centroid(pts, rec - bg_val), _centroid(pts, gt - bg_val))

    bg = gt == bg_val
    mad = float(np.abs(rec[bg] - bg_val).mean()) if bg.any() else None
    within = float(np.mean(np.abs(rec[bg] - bg_val) <= 0.1)) if bg.any() else None

    per, means = [], []
    if phantom is not None and phantom.inclusions:
        cents = np.array([inc.shape.centroid() for inc in phantom.inclusions])
        owner = np.argmin(((pts[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
        for k, inc in enumerate(phantom.inclusions):
            sel = owner == k
            per.append(_dist(_centroid(pts[sel], rec[sel] - bg_val), _centroid(pts[sel], gt[sel] - bg_val)))
            inside = np.asarray(inc.shape.contains(pts[:, 0], pts[:, 1]), dtype=bool)
            means.append(float(rec[inside].mean()) if inside.any() else None)
    return MetricReport(rmse, rel, r, ce, per, mad, within, means, runtime)


def relative_l2(a, b, mask=None) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if mask is not None:
        a, b = a[mask], b[mask]
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def finite_or_none(x):
    return None if x is None or not math.isfinite(x) else x
