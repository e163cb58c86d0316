import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from videogeom.metrics import (
    EmptyMaskError,
    align_affine,
    align_scale_seq,
    angular_error_deg,
    depth_metrics,
    evaluate_sequence,
    lower_median,
    normal_metrics,
    pointmap_metrics,
)


def test_lower_median():
    assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0
    assert lower_median(np.array([5.0])) == 5.0
    with pytest.raises(EmptyMaskError):
        lower_median(np.array([]))


def test_closed_cases(rng):
    gt = rng.uniform(1, 10, (2, 5, 5))
    mask = np.ones(gt.shape, bool)
    assert depth_metrics(gt, gt, mask) == (0.0, 1.0)
    rel, d1 = depth_metrics(1.3 * gt, gt, mask)
    assert rel == pytest.approx(0.3, abs=1e-14) and d1 == 0.0


def test_alignment_recovers_planted_parameters(rng):
    gt = rng.uniform(1, 10, (3, 6, 6))
    mask = rng.random(gt.shape) < 0.7
    assert align_scale_seq(gt / 4.0, gt, mask) == pytest.approx(4.0, rel=1e-14)
    a, b = align_affine((gt[0] - 0.5) / 2.0, gt[0], mask[0])
    assert (a, b) == (pytest.approx(2.0, rel=1e-12), pytest.approx(0.5, rel=1e-10))
    with pytest.raises(ValueError):
        align_affine(np.ones((4, 4)), gt[0, :4, :4], np.ones((4, 4), bool))
    with pytest.raises(EmptyMaskError):
        align_scale_seq(gt, gt, np.zeros(gt.shape, bool))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_scale_aligned_metrics_are_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 10, (2, 4, 4))
    pred = gt * rng.uniform(0.7, 1.4, gt.shape)
    mask = np.ones(gt.shape, bool)
    a = depth_metrics(pred, gt, mask, align_scale_seq(pred, gt, mask))
    b = depth_metrics(k * pred, gt, mask, align_scale_seq(k * pred, gt, mask))
    assert abs(a[0] - b[0]) <= 1e-6 and a[1] == b[1]


def test_pointmap_and_normals(rng):
    gt = rng.standard_normal((2, 3, 4, 4))
    mask = np.ones((2, 4, 4), bool)
    assert pointmap_metrics(gt, gt, mask)[:2] == (0.0, 1.0)
    gt[0, :, 0, 0] = 0
    assert pointmap_metrics(gt, gt, mask)[2] == 1
    n = np.zeros((1, 3, 2, 2))
    n[:, 2] = -1
    tilted = n.copy()
    tilted[:, 0] = 1.0  # 45 degrees
    assert np.allclose(angular_error_deg(tilted, n), 45)
    assert normal_metrics(n, n, np.ones((1, 2, 2), bool)) == (0.0, 0.0, 1.0)


def test_evaluate_sequence_modes(rng):
    gt = {"depth": rng.uniform(1, 5, (2, 6, 6))}
    gt["valid"] = np.ones(gt["depth"].shape, bool)
    pred = {"depth": 2 * gt["depth"]}
    rep = evaluate_sequence(pred, gt, "scale-seq")
    assert rep.rel == pytest.approx(0, abs=1e-15) and rep.alignment["s"] == 0.5
    rep = evaluate_sequence({"depth": 2 * gt["depth"] + 1}, gt, "affine")
    assert rep.rel < 1e-12 and len(rep.alignment["params"]) == 2
    rep = evaluate_sequence(pred, gt, "none", max_depth=3.0, crop=(1, 1, 1, 1))
    assert rep.valid_count == int(np.sum(gt["depth"][:, 1:-1, 1:-1] <= 3.0))
    assert rep.excluded == 2 * 16 - rep.valid_count
    with pytest.raises(ValueError):
        evaluate_sequence(pred, gt, "median")
