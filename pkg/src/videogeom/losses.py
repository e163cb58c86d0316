"""Scale-aligned point-map loss and angular normal losses.

All losses run in float64 on numpy arrays and return analytic gradients with
respect to the prediction, so they can be checked against finite differences
and then pushed into an autograd graph with ``tensor.backward(grad)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import point_tangents, tangent_grad_to_points

__all__ = [
    "EmptyInstanceError",
    "DegenerateInstanceError",
    "LossWeights",
    "LossTerm",
    "GeometryTargets",
    "TotalLoss",
    "weighted_median",
    "scale_objective",
    "solve_scale",
    "points_loss",
    "normal_loss",
    "points_normal_loss",
    "total_loss",
]

COS_CLAMP = 1e-7
SCALE_RANGE = (1e-6, 1e6)


class EmptyInstanceError(ValueError):
    pass


class DegenerateInstanceError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_points_normal: float = 1.0
    lambda_normal: float = 1.0

    def __post_init__(self):
        for v in (self.lambda_points_normal, self.lambda_normal):
            if not np.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and non-negative")


class LossTerm(NamedTuple):
    value: float
    grad: np.ndarray
    excluded: int = 0


@dataclass
class GeometryTargets:
    points: np.ndarray  # [N, 3, H, W]
    depth: np.ndarray  # [N, H, W]
    valid: np.ndarray  # [N, H, W] bool
    normals: np.ndarray | None = None


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Smallest value whose cumulative weight reaches half the total."""
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    idx = int(np.searchsorted(cw, 0.5 * cw[-1], side="left"))
    return float(values[order][min(idx, len(cw) - 1)])


def _scale_terms(pred, gt, gt_depth, valid):
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    gt_depth = np.asarray(gt_depth, np.float64)
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise EmptyInstanceError("no valid pixels")
    if np.any(gt_depth[valid] <= 0):
        raise ValueError("gt depth must be positive on valid pixels")
    # components as [3, n_valid]
    p = np.moveaxis(pred, -3, 0)[:, valid]
    g = np.moveaxis(gt, -3, 0)[:, valid]
    inv_d = 1.0 / gt_depth[valid]
    return p, g, inv_d


def scale_objective(s, pred, gt, gt_depth, valid) -> np.ndarray:
    """Depth-weighted L1 alignment objective evaluated at scale(s) ``s``."""
    p, g, inv_d = _scale_terms(pred, gt, gt_depth, valid)
    s = np.asarray(s, np.float64)
    res = np.abs(s[..., None, None] * p - g)
    return np.sum(res * inv_d, axis=(-1, -2))


def solve_scale(pred_points, gt_points, gt_depth, valid_mask) -> float:
    """Exact minimiser of ``sum_p (1/D_p) || s P_p - P^_p ||_1`` over s.

    The objective is ``sum_k w_k |s - r_k|`` with ``r_k = P^_k / P_k`` and
    ``w_k = |P_k| / D`` for every non-zero predicted component, so its
    minimiser is a weighted median of the ratios.
    """
    p, g, inv_d = _scale_terms(pred_points, gt_points, gt_depth, valid_mask)
    w = np.abs(p) * inv_d
    nz = p != 0
    if not nz.any():
        raise DegenerateInstanceError("all predicted components are zero")
    s = weighted_median(g[nz] / p[nz], w[nz])
    return float(np.clip(s, *SCALE_RANGE))


def points_loss(pred_points, gt_points, gt_depth, valid_mask, scale: float | None = None) -> LossTerm:
    """Scale-aligned, depth-weighted L1 point loss averaged over valid pixels.

    The scale is treated as a constant in the gradient.
    """
    s = solve_scale(pred_points, gt_points, gt_depth, valid_mask) if scale is None else scale
    pred = np.asarray(pred_points, np.float64)
    valid = np.asarray(valid_mask, bool)
    n = int(valid.sum())
    res = s * pred - np.asarray(gt_points, np.float64)
    w = np.where(valid, 1.0 / np.where(valid, gt_depth, 1.0), 0.0)[..., None, :, :]
    value = float(np.sum(np.abs(res) * w) / n)
    grad = s * np.sign(res) * w / n
    return LossTerm(value, grad)


def _angular(a, g, valid):
    """Mean clamped angle between ``a`` and ``g`` (``[..., 3, H, W]``) and its gradient in ``a``."""
    na = np.linalg.norm(a, axis=-3)
    ng = np.linalg.norm(g, axis=-3)
    use = valid & (na > 0) & (ng > 0)
    n = int(use.sum())
    if n == 0:
        raise EmptyInstanceError("no pixels with usable normals")
    na_s = np.where(use, na, 1.0)
    ng_s = np.where(use, ng, 1.0)
    cos = np.sum(a * g, axis=-3) / (na_s * ng_s)
    lo, hi = -1.0 + COS_CLAMP, 1.0 - COS_CLAMP
    cc = np.clip(cos, lo, hi)
    theta = np.arccos(cc)
    value = float(np.sum(np.where(use, theta, 0.0)) / n)
    inside = use & (cos > lo) & (cos < hi)
    coef = np.where(inside, -1.0 / np.sqrt(1.0 - cc * cc), 0.0) / n
    dcos = g / (na_s * ng_s)[..., None, :, :] - (cos / (na_s * na_s))[..., None, :, :] * a
    grad = coef[..., None, :, :] * dcos
    return value, grad, int(np.sum(valid & ~use))


def normal_loss(pred_normals, gt_normals, valid_mask) -> LossTerm:
    """Mean angular distance between predicted and gt normals, in radians.

    Pixels with a zero-length prediction are skipped and counted in ``excluded``.
    """
    a = np.asarray(pred_normals, np.float64)
    g = np.asarray(gt_normals, np.float64)
    value, grad, excluded = _angular(a, g, np.asarray(valid_mask, bool))
    return LossTerm(value, grad, excluded)


def points_normal_loss(pred_points, gt_normals, valid_mask, eps: float = 1e-12) -> LossTerm:
    """Angular loss on normals derived from the predicted point map.

    Same stencil and orientation as :func:`geometry.normals_from_points`;
    pixels with a degenerate cross product are skipped and counted.
    """
    p = np.asarray(pred_points, np.float64)
    g = np.asarray(gt_normals, np.float64)
    valid = np.asarray(valid_mask, bool)
    tu, tv = point_tangents(p)
    c = np.cross(tu, tv, axis=-3)
    cn = np.linalg.norm(c, axis=-3)
    scale = np.linalg.norm(tu, axis=-3) * np.linalg.norm(tv, axis=-3)
    ok = cn > eps * np.maximum(scale, eps)
    sign = np.where(c[..., 2, :, :] > 0, -1.0, 1.0)[..., None, :, :]
    a = np.where(ok[..., None, :, :], sign * c, 0.0)
    value, g_a, _ = _angular(a, g, valid & ok)
    g_c = sign * g_a
    g_tu = np.cross(tv, g_c, axis=-3)
    g_tv = np.cross(g_c, tu, axis=-3)
    return LossTerm(value, tangent_grad_to_points(g_tu, g_tv), int(np.sum(valid & ~ok)))


@dataclass
class TotalLoss:
    total: float
    points: float
    normal: float
    points_normal: float
    grad_points: np.ndarray
    grad_normals: np.ndarray
    scale: float


def total_loss(pred_points, pred_normals, targets: GeometryTargets, weights: LossWeights) -> TotalLoss:
    """Point loss plus weighted normal terms; normal terms vanish without gt normals."""
    s = solve_scale(pred_points, targets.points, targets.depth, targets.valid)
    pl = points_loss(pred_points, targets.points, targets.depth, targets.valid, scale=s)
    grad_p = pl.grad
    grad_n = np.zeros(np.shape(pred_normals))
    nl = pnl = 0.0
    if targets.normals is not None:
        t = normal_loss(pred_normals, targets.normals, targets.valid)
        nl, grad_n = t.value, weights.lambda_normal * t.grad
        t = points_normal_loss(pred_points, targets.normals, targets.valid)
        pnl, grad_p = t.value, grad_p + weights.lambda_points_normal * t.grad
    total = pl.value + weights.lambda_points_normal * pnl + weights.lambda_normal * nl
    return TotalLoss(total, pl.value, nl, pnl, grad_p, grad_n, s)
