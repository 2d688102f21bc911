import math

import numpy as np
import pytest

from metaforge.errors import ValidationError
from metaforge.metrics import (
    KernelMatchReport,
    depth_metrics,
    kernel_metrics,
    layer_metrics,
)


def oracle_kernel_metrics(a, b):
    """Independent brute-force accumulation with plain python floats."""
    a = [float(v) for v in np.ravel(a)]
    b = [float(v) for v in np.ravel(b)]
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    ncc = num / (da * db) if da * db > 0 else math.nan
    na = math.sqrt(sum(x * x for x in a)) or 1.0
    nb = math.sqrt(sum(y * y for y in b)) or 1.0
    diffs = [x / na - y / nb for x, y in zip(a, b)]
    rmse = math.sqrt(sum(d * d for d in diffs) / n)
    mae = sum(abs(d) for d in diffs) / n
    return ncc, rmse, mae


def oracle_depth_metrics(pred, gt, mask):
    absrel = sqrel = sq = sqlog = 0.0
    d1 = d2 = d3 = 0
    n = 0
    for p, g, m in zip(np.ravel(pred), np.ravel(gt), np.ravel(mask)):
        if not m:
            continue
        n += 1
        absrel += abs(p - g) / g
        sqrel += (p - g) ** 2 / g
        sq += (p - g) ** 2
        sqlog += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        d1 += r < 1.25
        d2 += r < 1.25 ** 2
        d3 += r < 1.25 ** 3
    return (absrel / n, sqrel / n, math.sqrt(sq / n), math.sqrt(sqlog / n),
            d1 / n, d2 / n, d3 / n)


def test_self_comparison(rng):
    x = rng.random((6, 6))
    rep = kernel_metrics(x, x)
    assert rep.ncc == pytest.approx(1.0, abs=1e-12)
    assert rep.rmse == 0.0
    assert rep.mae == 0.0


def test_anticorrelation(rng):
    x = rng.random((5, 5))
    assert kernel_metrics(-x, x).ncc == pytest.approx(-1.0, abs=1e-12)


def test_small_case_matches_hand_oracle():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0, 2.0], [3.0, 5.0]])
    rep = kernel_metrics(a, b)
    ncc, rmse, mae = oracle_kernel_metrics(a, b)
    assert rep.ncc == pytest.approx(ncc, rel=1e-12)
    assert rep.rmse == pytest.approx(rmse, rel=1e-12)
    assert rep.mae == pytest.approx(mae, rel=1e-12)


def test_random_cases_match_oracle(rng):
    for _ in range(10):
        a, b = rng.standard_normal((7, 7)), rng.standard_normal((7, 7))
        rep = kernel_metrics(a, b)
        ncc, rmse, mae = oracle_kernel_metrics(a, b)
        assert rep.ncc == pytest.approx(ncc, abs=1e-10)
        assert rep.rmse == pytest.approx(rmse, abs=1e-10)
        assert rep.mae == pytest.approx(mae, abs=1e-10)


def test_ncc_affine_invariance(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    base = kernel_metrics(a, b).ncc
    assert kernel_metrics(2.5 * a + 1.0, b).ncc == pytest.approx(base, abs=1e-12)
    assert kernel_metrics(a, 0.3 * b - 7.0).ncc == pytest.approx(base, abs=1e-12)


def test_constant_target_ncc_is_error_value(rng):
    a = rng.random((4, 4))
    rep = kernel_metrics(a, np.full((4, 4), 3.0))
    assert math.isnan(rep.ncc)
    assert rep.rmse > 0 and rep.mae > 0  # still computed


def test_shape_mismatch(rng):
    with pytest.raises(ValidationError):
        kernel_metrics(rng.random((3, 3)), rng.random((4, 4)))


def test_layer_metrics_single_and_mean():
    r1 = KernelMatchReport(1.0, 0.0, 0.0)
    assert layer_metrics([r1]) == r1
    r2 = KernelMatchReport(0.0, 1.0, 1.0)
    avg = layer_metrics([r1, r2])
    assert (avg.ncc, avg.rmse, avg.mae) == (0.5, 0.5, 0.5)
    with pytest.raises(ValidationError):
        layer_metrics([])


def test_depth_perfect_prediction(rng):
    gt = 1.0 + rng.random((6, 6)) * 50
    rep = depth_metrics(gt, gt)
    assert (rep.absrel, rep.sqrel, rep.rmse_m, rep.rms_log) == (0, 0, 0, 0)
    assert (rep.delta1, rep.delta2, rep.delta3) == (1, 1, 1)


def test_depth_uniform_overestimate_closed_form(rng):
    gt = 1.0 + rng.random((6, 6)) * 10
    rep = depth_metrics(1.2 * gt, gt)
    assert rep.absrel == pytest.approx(0.2, rel=1e-12)
    assert rep.delta1 == 1.0  # 1.2 < 1.25
    assert rep.rms_log == pytest.approx(math.log(1.2), rel=1e-12)


def test_depth_random_matches_loop_oracle(rng):
    pred = 1.0 + rng.random((8, 8)) * 20
    gt = 1.0 + rng.random((8, 8)) * 20
    mask = rng.random((8, 8)) > 0.3
    rep = depth_metrics(pred, gt, mask)
    want = oracle_depth_metrics(pred, gt, mask)
    got = (rep.absrel, rep.sqrel, rep.rmse_m, rep.rms_log,
           rep.delta1, rep.delta2, rep.delta3)
    for g, w in zip(got, want):
        assert g == pytest.approx(w, abs=1e-10)


def test_depth_delta_symmetry_absrel_asymmetry(rng):
    pred = 1.0 + rng.random((8, 8)) * 5
    gt = 1.0 + rng.random((8, 8)) * 5
    fwd = depth_metrics(pred, gt)
    rev = depth_metrics(gt, pred)
    assert (fwd.delta1, fwd.delta2, fwd.delta3) == (rev.delta1, rev.delta2, rev.delta3)
    assert fwd.absrel != rev.absrel


def test_depth_mask_respecting(rng):
    pred = 1.0 + rng.random((8, 8))
    gt = 1.0 + rng.random((8, 8))
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = True
    base = depth_metrics(pred, gt, mask)
    tampered_pred = pred.copy()
    tampered_pred[~mask] = -999.0  # nonpositive outside the mask is fine
    tampered = depth_metrics(tampered_pred, gt, mask)
    assert tampered == base


def test_depth_validation(rng):
    good = 1.0 + rng.random((4, 4))
    with pytest.raises(ValidationError):
        depth_metrics(good, good, np.zeros((4, 4), bool))  # empty mask
    bad = good.copy()
    bad[0, 0] = 0.0
    with pytest.raises(ValidationError):
        depth_metrics(bad, good)
    with pytest.raises(ValidationError):
        depth_metrics(good, good, np.ones((2, 2), bool))
