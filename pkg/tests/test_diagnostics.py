import json
import math

import numpy as np
import pytest

from segflow.core import AlphaDensity, StepRecord, TrajectoryLog
from segflow.diagnostics import (
    Check,
    DiagnosticReport,
    kl_proxy,
    loglog_slope,
    midpoint_nll,
    norm_derivative,
    norm_derivative_residual,
    numerical_kl,
    plausibility,
    point_set,
    transport_kl_proxy,
)
from segflow.errors import ContractError, DomainError, PrecisionError
from segflow.fields import GaussianMixtureField, GaussianMixtureTarget, ZeroField


def linear_log(xa_fn, xb_fn, va, vb, times):
    recs = []
    for i, (t1, t2) in enumerate(zip(times, times[1:])):
        xa, xb = xa_fn(t1), xb_fn(t1)
        recs.append(StepRecord(i, t1, t2, xa, xb, va, vb, None, 0.0, np.array([]), np.array([]),
                               float(np.linalg.norm(xb - xa))))
    return TrajectoryLog(recs, xa_fn(times[-1]), xb_fn(times[-1]))


def test_residual_zero_for_equal_velocities():
    v = np.array([0.4, -0.1])
    times = np.linspace(1, 0, 11)
    log = linear_log(lambda t: np.array([0.0, 0.0]) + t * v, lambda t: np.array([1.0, 1.0]) + t * v, v, v, times)
    res = norm_derivative_residual(log)
    assert res.residuals.size == 10 and res.max <= 1e-12


def test_residual_zero_for_hand_built_linear_log():
    times = np.linspace(1, 0.1, 10)
    log = linear_log(lambda t: np.zeros(1), lambda t: np.array([t]), np.zeros(1), np.ones(1), times)
    assert norm_derivative(np.zeros(1), np.array([0.5]), np.zeros(1), np.ones(1)) == 1.0
    assert norm_derivative_residual(log).max <= 1e-12


def test_residual_skips_degenerate_steps():
    times = np.linspace(1, 0, 5)
    log = linear_log(lambda t: np.zeros(2), lambda t: np.zeros(2), np.ones(2), np.ones(2), times)
    res = norm_derivative_residual(log)
    assert res.empty and math.isnan(res.max)


def test_residual_uses_smoothed_velocities():
    # raw velocities pull apart, the anchor (w=1) keeps the norm fixed
    rec = StepRecord(0, 1.0, 0.5, np.zeros(1), np.ones(1), np.array([-1.0]), np.array([1.0]), np.array([0.3]),
                     1.0, np.array([]), np.array([]), 1.0)
    log = TrajectoryLog([rec], np.array([-0.15]), np.array([0.85]))
    assert norm_derivative_residual(log).max <= 1e-12


# ---------------------------------------------------------------- KL


def test_kl_proxy_examples():
    a = point_set([0.5], [1.0], [0.0])
    b = point_set([0.5], [1.0], [0.1])
    assert kl_proxy(a, a, 0.05) == 0.0
    assert kl_proxy(a, b, 0.05) == pytest.approx(2.0)
    assert kl_proxy(a, b, 0.05) == kl_proxy(b, a, 0.05)


def test_kl_proxy_contracts():
    a = point_set([0.2, 0.8], [0.5, 0.5], [0.0, 1.0])
    with pytest.raises(ContractError):
        kl_proxy(a, point_set([0.3, 0.8], [0.5, 0.5], [0.0, 1.0]), 0.1)
    with pytest.raises(ContractError):
        kl_proxy(a, point_set([0.2, 0.8], [0.5, 0.5], [[0.0, 0.0], [1.0, 1.0]]), 0.1)
    with pytest.raises(DomainError):
        kl_proxy(a, a, 0.0)


def test_numerical_kl_identities():
    a = point_set([0.2, 0.8], [0.5, 0.5], [0.2, 0.8])
    assert abs(numerical_kl(a, a, 0.05)) <= 1e-10
    delta = 0.7
    p = point_set([0.5], [1.0], [0.0])
    q = point_set([0.5], [1.0], [delta])
    assert numerical_kl(p, q, 1.0) == pytest.approx(delta**2 / 2, rel=1e-8)


def test_numerical_kl_nonnegative_on_random_sets():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = point_set([0.1, 0.5, 0.9], [0.2, 0.5, 0.3], rng.normal(size=3))
        b = point_set([0.1, 0.5, 0.9], [0.2, 0.5, 0.3], rng.normal(size=3))
        assert numerical_kl(a, b, 0.3) >= 0.0


def test_numerical_kl_precision_guards():
    a = point_set([0.5], [1.0], [0.0])
    with pytest.raises(PrecisionError):
        numerical_kl(a, a, 0.1, resolution=500)
    with pytest.raises(PrecisionError):
        numerical_kl(a, a, 0.1, pad=3.0)
    with pytest.raises(PrecisionError):
        numerical_kl(point_set([0.1, 0.9], [0.5, 0.5], [0.0, 1000.0]), point_set([0.1, 0.9], [0.5, 0.5],
                                                                                   [0.0, 1000.0]), 1e-2)
    with pytest.raises(DomainError):
        numerical_kl(point_set([0.5], [1.0], [[0.0, 0.0]]), point_set([0.5], [1.0], [[0.0, 0.0]]), 0.1)


def test_kl_proxy_ratio_degrades_at_large_sigma():
    alphas, weights = np.array([0.2, 0.8]), np.array([0.5, 0.5])
    true = point_set(alphas, weights, alphas)
    approx = point_set(alphas, weights, 0.1 + 1.1 * alphas)
    ratios = [kl_proxy(true, approx, s) / numerical_kl(true, approx, s) for s in (1e-2, 1e-1)]
    assert abs(ratios[0] - 1) < 0.01
    assert abs(ratios[1] - 1) > abs(ratios[0] - 1)


# ---------------------------------------------------------------- plausibility


def test_plausibility_mode_and_symmetry():
    one = GaussianMixtureTarget([1.0], [[0.3, -0.2]], [[0.5, 0.25]], np.zeros((2, 0)))
    c = np.zeros(0)
    at_mode = plausibility(one, c, np.array([0.3, -0.2]))
    assert at_mode == pytest.approx(0.5 * np.log((2 * np.pi) ** 2 * 0.5 * 0.25))
    assert plausibility(one, c, np.array([0.4, -0.2])) > at_mode
    sym = GaussianMixtureTarget([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [[0.2, 0.2], [0.2, 0.2]], np.zeros((2, 0)))
    assert plausibility(sym, c, np.array([-1.0, 0.0])) == pytest.approx(plausibility(sym, c, np.array([1.0, 0.0])))


def test_midpoint_nll_uses_averaged_condition():
    target = GaussianMixtureTarget([1.0], [[0.0]], [[1.0]], [[1.0]])
    ca, cb = np.array([-1.0]), np.array([3.0])
    assert midpoint_nll(target, ca, cb, np.array([0.0]), np.array([2.0])) == pytest.approx(0.5 * np.log(2 * np.pi))


def test_transport_kl_proxy_zero_for_zero_field():
    recs = [StepRecord(i, 1 - 0.25 * i, 0.75 - 0.25 * i, np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1),
                       None, 0.0, np.array([]), np.array([]), 1.0) for i in range(4)]
    log = TrajectoryLog(recs, np.zeros(1), np.ones(1))
    assert transport_kl_proxy(ZeroField(1), log, np.zeros(0), np.zeros(0), AlphaDensity.uniform(), 4, 0.1) == 0.0


def test_transport_kl_proxy_positive_when_segment_lags():
    target = GaussianMixtureTarget([1.0], [[0.0]], [[0.1]], [[1.0]])
    field = GaussianMixtureField(target)
    rec = StepRecord(0, 0.5, 0.25, np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1), None, 0.0,
                     np.array([]), np.array([]), 1.0)
    log = TrajectoryLog([rec], np.zeros(1), np.ones(1))  # segment never moved
    assert transport_kl_proxy(field, log, np.array([-1.0]), np.array([1.0]), AlphaDensity.uniform(), 4, 0.1) > 0


# ---------------------------------------------------------------- reports


def test_report_json_and_slope():
    report = DiagnosticReport([Check("a", {}, {"x": np.float64(1.5)}, 0.1, True),
                               Check("b", {}, {"slope": float("nan")}, 0.1, False)])
    data = json.loads(report.to_json())
    assert data["passed"] is False and data["checks"][0]["values"]["x"] == 1.5
    assert report.checks[0].line().startswith("PASS")
    assert loglog_slope([1, 10, 100], [3, 30, 300]) == pytest.approx(1.0)
