"""Segment transport: Euler sampling, joint segment steps, smoothing, ablation variants.

A segment ``[xa, xb]`` carries a distribution of samples along it, weighted by
an alpha density. One joint step moves each weighted point with the
conditional field (condition interpolated the same way as the point), then
projects the moved points back onto a segment by weighted least squares. The
endpoint displacements divided by ``dt`` are the segment's velocities, which are
then pulled towards a shared anchor velocity to keep the segment from
stretching too fast.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .core import (
    AlphaDensity,
    Segment,
    StepRecord,
    TimeGrid,
    TrajectoryLog,
    WeightSchedule,
    alpha_grid,
    density_moments,
    density_preset,
    grid_moments,
    interpolate_condition,
)
from .errors import (
    ConfigurationError,
    DegenerateDensityError,
    DomainError,
    PropagationError,
    SegflowError,
)
from .fields import VelocityField

log = logging.getLogger(__name__)

DELTA_MIN = 1e-10
VARIANTS = ("A", "B", "C", "D")


def _check_finite(v, what, step=None):
    if not np.all(np.isfinite(v)):
        raise PropagationError(f"non-finite {what}", step)


def euler_step(field: VelocityField, x, t1: float, t2: float, c, step=None) -> np.ndarray:
    """``x + (t2 - t1) * field(x, t1, c)``."""
    if t2 > t1:
        raise DomainError(f"euler step must not go forward in time (t1={t1}, t2={t2})")
    x = np.asarray(x, dtype=np.float64)
    v = field.evaluate(x, t1, c)
    _check_finite(v, f"velocity at t={t1}", step)
    return x + (t2 - t1) * v


def sample_base(field: VelocityField, c, grid: TimeGrid, x_init) -> np.ndarray:
    """Plain Euler sampling down ``grid``; row ``i`` is the state at ``grid.times[i]``."""
    traj = [np.array(x_init, dtype=np.float64)]
    for step, t1, t2 in grid.steps():
        traj.append(euler_step(field, traj[-1], t1, t2, c, step))
    return np.stack(traj)


def _conditions(ca, cb, alphas) -> np.ndarray:
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    return np.stack([interpolate_condition(ca, cb, float(a)) for a in alphas])


def regression_endpoints(alphas, weights, targets, delta_min: float = DELTA_MIN) -> tuple[np.ndarray, np.ndarray]:
    """Endpoints minimizing ``sum_i w_i ||(1-a_i) xa + a_i xb - y_i||^2``.

    Closed-form normal-equation solution. The targets are centred on the first
    one beforehand; the line model reproduces constants, so this changes
    nothing mathematically but makes identical targets come back exactly.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if not (alphas.shape == weights.shape == targets.shape[:1]):
        raise DomainError("alphas, weights and targets must have matching lengths")
    c00, c01, c11, delta = grid_moments(alphas, weights)
    if not delta > delta_min:
        raise DegenerateDensityError(
            f"alpha distribution is degenerate (delta={delta:.3g} <= {delta_min:g}): "
            f"alphas={alphas.tolist()}, weights={weights.tolist()}")
    ref = targets[0]
    resid = targets - ref
    d0 = (weights * (1.0 - alphas)) @ resid
    d1 = (weights * alphas) @ resid
    xa = ref + (c11 * d0 - c01 * d1) / delta
    xb = ref + (c00 * d1 - c01 * d0) / delta
    return xa, xb


def regression_objective(alphas, weights, targets, xa, xb) -> float:
    alphas = np.asarray(alphas, dtype=np.float64)
    fitted = (1.0 - alphas)[:, None] * xa + alphas[:, None] * xb
    return float(np.sum(np.asarray(weights) * np.sum((fitted - targets) ** 2, axis=1)))


@dataclass(frozen=True, eq=False)
class JointStepResult:
    segment: Segment
    va: np.ndarray
    vb: np.ndarray
    alphas: np.ndarray
    weights: np.ndarray
    predicted: np.ndarray  # per-point Euler updates the regression was fitted to


def joint_step_detail(field: VelocityField, seg: Segment, ca, cb, t1: float, t2: float,
                      p: AlphaDensity, k: int, delta_min: float = DELTA_MIN, step=None) -> JointStepResult:
    if not t1 > t2:
        raise DomainError(f"joint step needs t1 > t2 (got t1={t1}, t2={t2})")
    alphas, weights = alpha_grid(p, k)
    points = seg.points(alphas)
    dt = t2 - t1
    vel = field.evaluate_batch(points, t1, _conditions(ca, cb, alphas))
    _check_finite(vel, f"velocity at t={t1}", step)
    predicted = points + dt * vel
    xa, xb = regression_endpoints(alphas, weights, predicted, delta_min)
    va = (xa - seg.a) / dt
    vb = (xb - seg.b) / dt
    return JointStepResult(Segment(xa, xb), va, vb, alphas, weights, predicted)


def joint_step(field: VelocityField, seg: Segment, ca, cb, t1: float, t2: float, p: AlphaDensity, k: int,
               delta_min: float = DELTA_MIN) -> tuple[Segment, np.ndarray, np.ndarray]:
    """One joint transport step of ``seg`` from ``t1`` to ``t2``.

    Returns the regressed segment and the endpoint velocities
    ``(x_new - x_old) / (t2 - t1)``.
    """
    res = joint_step_detail(field, seg, ca, cb, t1, t2, p, k, delta_min)
    return res.segment, res.va, res.vb


def anchor_velocity(field: VelocityField, seg: Segment, t: float, ca, cb, mode: str = "midpoint",
                    va=None, vb=None) -> np.ndarray:
    """Shared velocity both endpoints are pulled towards.

    ``midpoint`` evaluates the field at the segment midpoint with the averaged
    condition; ``average`` is the mean of the supplied endpoint velocities
    (falling back to evaluating them at the endpoints).
    """
    if mode == "midpoint":
        c_mid = (np.asarray(ca, dtype=np.float64) + np.asarray(cb, dtype=np.float64)) / 2.0
        return field.evaluate(seg.midpoint(), t, c_mid)
    if mode == "average":
        if va is None:
            va = field.evaluate(seg.a, t, ca)
        if vb is None:
            vb = field.evaluate(seg.b, t, cb)
        return (np.asarray(va) + np.asarray(vb)) / 2.0
    raise DomainError(f"unknown anchor mode {mode!r}")


def smooth_velocities(va, vb, v_anchor, w: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"smoothing weight {w} outside [0, 1]")
    va, vb, v_anchor = (np.asarray(v, dtype=np.float64) for v in (va, vb, v_anchor))
    if not va.shape == vb.shape == v_anchor.shape:
        raise DomainError("velocity dimensions disagree")
    return w * v_anchor + (1.0 - w) * va, w * v_anchor + (1.0 - w) * vb


# --------------------------------------------------------------------------
# integral form


class Estimator(NamedTuple):
    kind: str = "grid"  # "grid" or "monte_carlo"
    k: int = 4
    n: int = 1000


def integral_mu(field: VelocityField, seg: Segment, ca, cb, t: float, p: AlphaDensity,
                estimator: Estimator = Estimator(), rng: np.random.Generator | None = None):
    """Velocity moments ``mu0 = E[(1-a) v(x(a))]`` and ``mu1 = E[a v(x(a))]`` under ``p``."""
    if estimator.kind == "grid":
        alphas, weights = alpha_grid(p, estimator.k)
    elif estimator.kind == "monte_carlo":
        if estimator.n < 1:
            raise ConfigurationError("monte_carlo estimator needs n >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        alphas = p.sample(rng, estimator.n)
        weights = np.full(estimator.n, 1.0 / estimator.n)
    else:
        raise ConfigurationError(f"unknown estimator {estimator.kind!r}")
    vel = field.evaluate_batch(seg.points(alphas), t, _conditions(ca, cb, alphas))
    _check_finite(vel, f"velocity at t={t}")
    mu0 = (weights * (1.0 - alphas)) @ vel
    mu1 = (weights * alphas) @ vel
    return mu0, mu1


def estimator_moments(p: AlphaDensity, estimator: Estimator) -> tuple[float, float, float, float]:
    """Moments matching :func:`integral_mu`: discrete for the grid, exact for Monte Carlo."""
    if estimator.kind == "grid":
        return grid_moments(*alpha_grid(p, estimator.k))
    return density_moments(p)


def segment_velocities_from_mu(mu0, mu1, moments, delta_min: float = DELTA_MIN):
    c00, c01, c11, delta = moments
    if not delta > delta_min:
        raise DegenerateDensityError(f"alpha distribution is degenerate (delta={delta:.3g})")
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    return (c11 * mu0 - c01 * mu1) / delta, (c00 * mu1 - c01 * mu0) / delta


# --------------------------------------------------------------------------
# full runs


@dataclass(frozen=True)
class TransportConfig:
    """Settings for :func:`run_joint`.

    ``density`` is the late-stage alpha density; at each step it is blended
    with an atom at 0.5 carrying ``midpoint_share * w_step`` of the mass, so
    the density starts concentrated on the midpoint and relaxes as the weight
    schedule decays. ``cutoff`` is the number of shared steps for variant D
    (default: half the grid).
    """

    variant: str = "A"
    k: int = 4
    density: AlphaDensity = field(default_factory=lambda: density_preset("paper-image"))
    midpoint_share: float = 0.5
    weights: WeightSchedule = field(default_factory=lambda: WeightSchedule.constant(0.5))
    grid: TimeGrid = field(default_factory=lambda: TimeGrid.uniform(28))
    estimator: str = "grid"
    mc_samples: int = 1000
    cutoff: int | None = None
    seed: int = 0
    delta_min: float = DELTA_MIN

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.k < 2:
            raise ConfigurationError("k must be >= 2")
        if not 0.0 <= self.midpoint_share < 1.0:
            raise ConfigurationError("midpoint_share must lie in [0, 1)")
        if self.estimator not in ("grid", "monte_carlo"):
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")
        if self.cutoff is not None and self.cutoff < 0:
            raise ConfigurationError("cutoff must be >= 0")

    def density_at(self, step: int) -> AlphaDensity:
        share = self.midpoint_share * self.weights.weight(step, self.grid.n_steps)
        return self.density.blend_atom(0.5, share)

    def effective_cutoff(self) -> int:
        return self.grid.n_steps // 2 if self.cutoff is None else self.cutoff

    def with_variant(self, variant: str) -> "TransportConfig":
        return replace(self, variant=variant)


_ENDPOINTS = AlphaDensity.endpoints()


def run_joint(field: VelocityField, ca, cb, cfg: TransportConfig, x_init):
    """Transport a segment initialised at ``x_init`` (both endpoints) down the grid.

    ``x_init`` may also be a :class:`Segment` to start from distinct endpoints.
    Returns ``(final_a, final_b, log)``.
    """
    if isinstance(x_init, Segment):
        xa, xb = x_init.a.copy(), x_init.b.copy()
    else:
        xa = np.array(x_init, dtype=np.float64)
        xb = xa.copy()
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    n = cfg.grid.n_steps
    rng = np.random.default_rng(cfg.seed)
    est = Estimator("monte_carlo", cfg.k, cfg.mc_samples) if cfg.estimator == "monte_carlo" else None
    trajectory = TrajectoryLog()
    for step, t1, t2 in cfg.grid.steps():
        seg = Segment(xa, xb)
        dt = t2 - t1
        try:
            if cfg.variant == "D":
                w = 1.0 if step < cfg.effective_cutoff() else 0.0
                va = field.evaluate(xa, t1, ca)
                vb = field.evaluate(xb, t1, cb)
                _check_finite(np.concatenate([va, vb]), f"velocity at t={t1}", step)
                anchor = (va + vb) / 2.0
                alphas, weights = np.array([0.0, 1.0]), np.array([0.5, 0.5])
            else:
                w = cfg.weights.weight(step, n)
                if cfg.variant == "C":
                    p, k = _ENDPOINTS, 2
                else:
                    p, k = cfg.density_at(step), cfg.k
                if est is None or cfg.variant == "C":
                    res = joint_step_detail(field, seg, ca, cb, t1, t2, p, k, cfg.delta_min, step)
                    va, vb, alphas, weights = res.va, res.vb, res.alphas, res.weights
                else:
                    mu0, mu1 = integral_mu(field, seg, ca, cb, t1, p, est, rng)
                    va, vb = segment_velocities_from_mu(mu0, mu1, density_moments(p), cfg.delta_min)
                    alphas, weights = np.array([]), np.array([])
                if cfg.variant == "A":
                    anchor = anchor_velocity(field, seg, t1, ca, cb, "midpoint")
                else:
                    anchor = anchor_velocity(field, seg, t1, ca, cb, "average", va, vb)
                _check_finite(anchor, f"anchor velocity at t={t1}", step)
            vha, vhb = smooth_velocities(va, vb, anchor, w)
        except PropagationError:
            raise
        except SegflowError as exc:
            raise type(exc)(f"step {step}: {exc}") from exc
        trajectory.records.append(StepRecord(
            step=step, t1=t1, t2=t2, xa=xa, xb=xb, va=va, vb=vb, v_anchor=anchor, w=w,
            alphas=alphas, alpha_weights=weights, norm=float(np.linalg.norm(xb - xa))))
        xa = xa + dt * vha
        xb = xb + dt * vhb
        _check_finite(np.concatenate([xa, xb]), "state", step)
    trajectory.final_a, trajectory.final_b = xa, xb
    return xa, xb, trajectory
