"""Depth, point-map and surface-normal evaluation metrics with alignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmptyMaskError",
    "MetricReport",
    "lower_median",
    "align_scale_seq",
    "align_affine",
    "depth_metrics",
    "pointmap_metrics",
    "normal_metrics",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("rel", "delta1", "rel_p", "delta_p_025", "n_mean_deg", "n_med_deg", "delta_1125", "valid_count")


class EmptyMaskError(ValueError):
    pass


@dataclass
class MetricReport:
    rel: float | None = None
    delta1: float | None = None
    rel_p: float | None = None
    delta_p_025: float | None = None
    normal_mean_deg: float | None = None
    normal_median_deg: float | None = None
    delta_11_25: float | None = None
    alignment: dict = field(default_factory=lambda: {"kind": "none"})
    valid_count: int = 0
    excluded: int = 0

    def row(self) -> list:
        return [self.rel, self.delta1, self.rel_p, self.delta_p_025,
                self.normal_mean_deg, self.normal_median_deg, self.delta_11_25, self.valid_count]


def lower_median(values: np.ndarray) -> float:
    """Median with the lower middle element for even counts."""
    v = np.sort(np.ravel(values))
    if v.size == 0:
        raise EmptyMaskError("median of an empty set")
    return float(v[(v.size - 1) // 2])


def _valid(mask, gt_depth):
    mask = np.asarray(mask, dtype=bool) & (np.asarray(gt_depth) > 0)
    return mask


def align_scale_seq(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """One scale per sequence: the median of ``gt / pred`` over valid pixels.

    ``pred``/``gt`` are depth stacks ``[N, H, W]``; pixels with non-positive
    gt or prediction are ignored.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    m = _valid(mask, gt) & (pred > 0)
    if not m.any():
        raise EmptyMaskError("no valid pixels for scale alignment")
    return lower_median(gt[m] / pred[m])


def align_affine(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Least-squares ``a * pred + b ~ gt`` over the valid pixels of one frame."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    m = _valid(mask, gt)
    x, y = pred[m], gt[m]
    if x.size < 2:
        raise EmptyMaskError("affine alignment needs at least two valid pixels")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx <= 1e-300 * max(1.0, xm * xm):
        raise ValueError("affine alignment is degenerate: prediction is constant")
    a = np.sum((x - xm) * (y - ym)) / sxx
    return float(a), float(ym - a * xm)


def depth_metrics(pred, gt, mask, s: float = 1.0, shift: float = 0.0) -> tuple[float, float]:
    """``(Rel, delta1)`` of ``s * pred + shift`` against ``gt``."""
    gt = np.asarray(gt, np.float64)
    m = _valid(mask, gt)
    if not m.any():
        raise EmptyMaskError("no valid pixels")
    d = s * np.asarray(pred, np.float64)[m] + shift
    g = gt[m]
    rel = np.mean(np.abs(d - g) / g)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d / g, g / d)
    ok = (d > 0) & (ratio < 1.25)
    return float(rel), float(np.mean(ok))


def pointmap_metrics(pred, gt, mask, s: float = 1.0) -> tuple[float, float, int]:
    """``(Rel^p, delta^p_0.25, excluded)`` for ``[..., 3, H, W]`` point maps.

    Pixels whose gt point has zero norm are dropped and counted in ``excluded``.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    gnorm = np.linalg.norm(gt, axis=-3)
    mask = np.asarray(mask, bool)
    m = mask & (gnorm > 0)
    excluded = int(np.sum(mask & ~(gnorm > 0)))
    if not m.any():
        raise EmptyMaskError("no valid points")
    err = np.linalg.norm(s * pred - gt, axis=-3)[m] / gnorm[m]
    return float(np.mean(err)), float(np.mean(err < 0.25)), excluded


def angular_error_deg(pred, gt) -> np.ndarray:
    """Per-pixel angle between ``[..., 3, H, W]`` normal maps, in degrees.

    atan2 of the cross and dot products: exact zero for identical vectors,
    and no loss of precision at small angles the way arccos has.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    cross = np.linalg.norm(np.cross(pred, gt, axis=-3), axis=-3)
    dot = np.sum(pred * gt, axis=-3)
    return np.degrees(np.arctan2(cross, dot))


def normal_metrics(pred, gt, mask) -> tuple[float, float, float]:
    """``(mean deg, lower-median deg, fraction below 11.25 deg)``."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    m = (np.asarray(mask, bool) & (np.linalg.norm(pred, axis=-3) > 0)
         & (np.linalg.norm(gt, axis=-3) > 0))
    if not m.any():
        raise EmptyMaskError("no valid normals")
    theta = angular_error_deg(pred, gt)[m]
    return float(np.mean(theta)), lower_median(theta), float(np.mean(theta < 11.25))


def _crop(a, crop):
    if not crop:
        return a
    top, bottom, left, right = crop
    return a[..., top : a.shape[-2] - bottom, left : a.shape[-1] - right]


def evaluate_sequence(
    pred: dict,
    gt: dict,
    align: str = "scale-seq",
    max_depth: float | None = None,
    crop: tuple[int, int, int, int] | None = None,
) -> MetricReport:
    """All available metrics for one sequence.

    ``pred``/``gt`` map ``depth``/``points``/``normals`` (and ``valid`` for gt)
    to stacked arrays; keys missing on either side are skipped.
    """
    gdepth = np.asarray(gt["depth"], np.float64)
    valid = np.asarray(gt.get("valid", gdepth > 0), bool) & (gdepth > 0)
    if max_depth is not None:
        valid &= gdepth <= max_depth
    valid = _crop(valid, crop)
    gdepth = _crop(gdepth, crop)
    report = MetricReport(valid_count=int(valid.sum()))
    report.excluded = int(_crop(np.asarray(gt.get("valid", gt["depth"] > 0), bool), crop).sum()) - report.valid_count
    if "depth" in pred:
        pdepth = _crop(np.asarray(pred["depth"], np.float64), crop)
        if align == "scale-seq":
            s = align_scale_seq(pdepth, gdepth, valid)
            report.alignment = {"kind": "scale", "s": s}
            report.rel, report.delta1 = depth_metrics(pdepth, gdepth, valid, s)
        elif align == "affine":
            rels, d1s, params = [], [], []
            for i in range(pdepth.shape[0]):
                a, b = align_affine(pdepth[i], gdepth[i], valid[i])
                params.append((a, b))
                w = valid[i].sum()
                r, d = depth_metrics(pdepth[i], gdepth[i], valid[i], a, b)
                rels.append(r * w)
                d1s.append(d * w)
            report.alignment = {"kind": "affine", "params": params}
            report.rel = float(sum(rels) / valid.sum())
            report.delta1 = float(sum(d1s) / valid.sum())
        elif align == "none":
            s = 1.0
            report.rel, report.delta1 = depth_metrics(pdepth, gdepth, valid, 1.0)
        else:
            raise ValueError(f"unknown alignment {align!r}")
    if "points" in pred and "points" in gt:
        s = report.alignment.get("s", 1.0)
        report.rel_p, report.delta_p_025, excl = pointmap_metrics(
            _crop(pred["points"], crop), _crop(gt["points"], crop), valid, s)
        report.excluded += excl
    if "normals" in pred and "normals" in gt:
        report.normal_mean_deg, report.normal_median_deg, report.delta_11_25 = normal_metrics(
            _crop(pred["normals"], crop), _crop(gt["normals"], crop), valid)
    return report
