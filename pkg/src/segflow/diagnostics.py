"""Numerical checks of the transport's analytical properties.

* segment-norm dynamics: finite differences of logged norms against the
  inner-product formula for the derivative of ``||xb - xa||``;
* probability matching: the weighted squared-distance proxy for the KL between
  two alpha-mixtures of narrow Gaussians, and a quadrature KL to test it on;
* plausibility: exact negative log-likelihood under the analytic target;
* gradient checking of the trainer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.integrate import simpson
from scipy.special import logsumexp
from scipy.stats import norm as std_normal

from .core import Segment, TrajectoryLog, alpha_grid
from .errors import ContractError, DomainError, PrecisionError
from .fields import GaussianMixtureTarget, VelocityField
from .trainer import Batch, MLPField, fm_loss, grad


@dataclass(frozen=True)
class NormResidual:
    steps: np.ndarray
    residuals: np.ndarray

    @property
    def empty(self) -> bool:
        return self.residuals.size == 0

    @property
    def max(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else float("nan")


def norm_derivative(xa, xb, va, vb) -> float:
    diff = np.asarray(xb) - np.asarray(xa)
    return float(np.dot(np.asarray(vb) - np.asarray(va), diff) / np.linalg.norm(diff))


def norm_derivative_residual(log: TrajectoryLog, min_norm: float = 1e-8) -> NormResidual:
    """Per-step ``(norm(t2) - norm(t1)) / (t2 - t1)`` minus the analytic derivative at ``t1``.

    The derivative uses the smoothed (applied) velocities. Steps whose starting
    norm is below ``min_norm`` are skipped; an all-degenerate log gives an empty
    result.
    """
    norms = log.norms()
    if len(log.records) < 1 or len(norms) < 2:
        return NormResidual(np.array([], dtype=int), np.array([]))
    steps, res = [], []
    for i, rec in enumerate(log.records):
        if i + 1 >= len(norms) or rec.norm < min_norm:
            continue
        vha, vhb = rec.smoothed()
        fd = (norms[i + 1] - rec.norm) / (rec.t2 - rec.t1)
        steps.append(rec.step)
        res.append(fd - norm_derivative(rec.xa, rec.xb, vha, vhb))
    return NormResidual(np.array(steps, dtype=int), np.array(res))


# --------------------------------------------------------------------------
# probability matching


class PointSet(NamedTuple):
    alphas: np.ndarray
    weights: np.ndarray
    states: np.ndarray  # (k, d)


def point_set(alphas, weights, states) -> PointSet:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    return PointSet(np.asarray(alphas, dtype=np.float64), np.asarray(weights, dtype=np.float64), states)


def _check_matched(true: PointSet, approx: PointSet) -> None:
    if true.alphas.shape != approx.alphas.shape or not (
            np.array_equal(true.alphas, approx.alphas) and np.array_equal(true.weights, approx.weights)):
        raise ContractError("point sets are on different alpha grids")
    if true.states.shape != approx.states.shape:
        raise ContractError("point sets have different state shapes")


def kl_proxy(true: PointSet, approx: PointSet, sigma: float) -> float:
    """``sum_i p_i ||x_true_i - x_approx_i||^2 / (2 sigma^2)``."""
    _check_matched(true, approx)
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    sq = np.sum((true.states - approx.states) ** 2, axis=1)
    return float(np.dot(true.weights, sq) / (2.0 * sigma * sigma))


def numerical_kl(true: PointSet, approx: PointSet, sigma: float, resolution: int = 20001,
                 pad: float = 8.0, tail_tol: float = 1e-10) -> float:
    """KL between two 1-D alpha-mixtures of ``N(x_i, sigma^2)`` by Simpson quadrature."""
    _check_matched(true, approx)
    if true.states.shape[1] != 1:
        raise DomainError("numerical_kl handles 1-D states only")
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    if resolution < 1000:
        raise PrecisionError(f"resolution {resolution} < 1000 nodes")
    mt, ma = true.states[:, 0], approx.states[:, 0]
    lo = min(mt.min(), ma.min()) - pad * sigma
    hi = max(mt.max(), ma.max()) + pad * sigma
    tail = float(np.dot(true.weights, std_normal.cdf((lo - mt) / sigma) + std_normal.sf((hi - mt) / sigma)))
    if tail > tail_tol:
        raise PrecisionError(f"tail mass {tail:.3g} outside the quadrature range exceeds {tail_tol:g}")
    xs = np.linspace(lo, hi, resolution)
    if xs[1] - xs[0] > sigma / 8:
        raise PrecisionError(f"grid spacing {xs[1] - xs[0]:.3g} too coarse for sigma={sigma:g}; raise resolution")
    w = true.weights / true.weights.sum()
    comp = -0.5 * np.log(2 * np.pi * sigma**2)
    log_p = logsumexp(np.log(w)[:, None] + comp - 0.5 * ((xs[None] - mt[:, None]) / sigma) ** 2, axis=0)
    log_q = logsumexp(np.log(w)[:, None] + comp - 0.5 * ((xs[None] - ma[:, None]) / sigma) ** 2, axis=0)
    return float(simpson(np.exp(log_p) * (log_p - log_q), x=xs))


def plausibility(target: GaussianMixtureTarget, c, x) -> float:
    """Negative log-likelihood of ``x`` under ``target(c)``."""
    return float(-target.logpdf(np.asarray(x, dtype=np.float64)[None, :],
                                np.asarray(c, dtype=np.float64)[None, :])[0])


def midpoint_nll(target: GaussianMixtureTarget, ca, cb, xa, xb) -> float:
    c_mid = (np.asarray(ca, dtype=np.float64) + np.asarray(cb, dtype=np.float64)) / 2
    return plausibility(target, c_mid, (np.asarray(xa) + np.asarray(xb)) / 2)


def transport_kl_proxy(field: VelocityField, log: TrajectoryLog, ca, cb, density, k: int,
                       sigma: float) -> float:
    """Mean per-step KL proxy between per-point Euler moves and the segment actually produced.

    For every logged step the alpha grid of ``density`` is placed on the segment
    at ``t1``; each point is moved individually with its interpolated condition
    and compared with the same alpha on the next segment. Works for any variant,
    including those that never evaluate intermediate points.
    """
    alphas, weights = alpha_grid(density, k)
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    conds = ca + alphas[:, None] * (cb - ca)
    values = []
    for i, rec in enumerate(log.records):
        if i + 1 < len(log.records):
            nxt = Segment(log.records[i + 1].xa, log.records[i + 1].xb)
        else:
            nxt = Segment(log.final_a, log.final_b)
        pts = Segment(rec.xa, rec.xb).points(alphas)
        moved = pts + (rec.t2 - rec.t1) * field.evaluate_batch(pts, rec.t1, conds)
        values.append(kl_proxy(PointSet(alphas, weights, moved), PointSet(alphas, weights, nxt.points(alphas)),
                               sigma))
    return float(np.mean(values)) if values else 0.0


# --------------------------------------------------------------------------
# gradient checking


def finite_difference_grad(field: MLPField, batch: Batch, h: float = 1e-5) -> np.ndarray:
    theta = field.flat()
    probe = field.copy()
    out = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        probe.set_flat(theta)
        up = fm_loss(probe, batch)
        theta[i] = old - h
        probe.set_flat(theta)
        down = fm_loss(probe, batch)
        theta[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def gradcheck(field: MLPField, batch: Batch, h: float = 1e-5, atol: float = 1e-10) -> float:
    """Worst relative error of :func:`grad` against central differences.

    Coordinates where both values are below ``atol`` in magnitude count as
    agreeing (relative error 0).
    """
    analytic = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grad(field, batch)])
    numeric = finite_difference_grad(field, batch, h)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(np.abs(analytic - numeric) <= atol, 0.0, np.abs(analytic - numeric) / np.where(scale > 0, scale, 1))
    return float(rel.max())


# --------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    parameters: dict
    values: dict
    tolerance: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.values}"


@dataclass
class DiagnosticReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "checks": [asdict(c) for c in self.checks]},
                          indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    raise TypeError(type(obj))


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log(ys)`` against ``log(xs)``."""
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])
