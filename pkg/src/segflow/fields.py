"""Conditional velocity fields.

A field maps ``(x, t, c)`` to a velocity in sample space. The exact field of a
condition-shifted diagonal Gaussian mixture is available in closed form
(:func:`gmm_velocity`); :func:`mc_velocity_oracle` estimates the same quantity
by kernel-weighted Monte Carlo over the noising process and shares no code
with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import ConfigurationError, DomainError, UnreliableEstimateError

DEFAULT_T_MIN = 1e-3


class VelocityField:
    """Base class for conditional velocity fields.

    Subclasses override :meth:`evaluate` or :meth:`evaluate_batch` (or both);
    each default is written in terms of the other. Fields must be pure.
    """

    dim: int
    cond_dim: int

    def evaluate(self, x, t: float, c) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        return self.evaluate_batch(x[None, :], t, c[None, :])[0]

    def evaluate_batch(self, xs, t: float, cs) -> np.ndarray:
        return np.stack([self.evaluate(x, t, c) for x, c in zip(xs, cs)])

    def __call__(self, x, t, c):
        return self.evaluate(x, t, c)


class ConstantField(VelocityField):
    def __init__(self, u, cond_dim: int = 0):
        self.u = np.array(u, dtype=np.float64)
        self.dim = self.u.size
        self.cond_dim = cond_dim

    def evaluate(self, x, t, c):
        return self.u.copy()

    def evaluate_batch(self, xs, t, cs):
        return np.tile(self.u, (len(xs), 1))


class ZeroField(ConstantField):
    def __init__(self, dim: int, cond_dim: int = 0):
        super().__init__(np.zeros(dim), cond_dim)


class FunctionField(VelocityField):
    """Wrap a plain ``fn(x, t, c) -> velocity`` callable."""

    def __init__(self, fn, dim: int, cond_dim: int = 0):
        self.fn = fn
        self.dim = dim
        self.cond_dim = cond_dim

    def evaluate(self, x, t, c):
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64), t, np.asarray(c, dtype=np.float64)),
                          dtype=np.float64)


@dataclass(frozen=True, eq=False)
class GaussianMixtureTarget:
    """Diagonal Gaussian mixture whose means are translated by ``condition_map @ c``.

    A variance entry of exactly zero makes that coordinate of the component a
    point mass.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    condition_map: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.array(self.means, dtype=np.float64))
        var = np.atleast_2d(np.array(self.variances, dtype=np.float64))
        J, d = mu.shape
        cmap = np.array(self.condition_map, dtype=np.float64)
        if cmap.size == 0:
            cmap = np.zeros((d, 0))
        cmap = cmap.reshape(d, -1)
        if w.shape != (J,) or var.shape != (J, d):
            raise ConfigurationError(
                f"mixture shapes disagree: weights {w.shape}, means {mu.shape}, variances {var.shape}")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-9):
            raise ConfigurationError("mixture weights must be non-negative and sum to 1")
        if np.any(var < 0):
            raise ConfigurationError("mixture variances must be >= 0")
        for arr in (w, mu, var, cmap):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError("mixture parameters must be finite")
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "condition_map", cmap)
        with np.errstate(divide="ignore"):
            lw = np.log(w)
        lw.setflags(write=False)
        object.__setattr__(self, "_log_weights", lw)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.condition_map.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def log_weights(self) -> np.ndarray:
        return self._log_weights

    def shift(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != self.cond_dim:
            raise DomainError(f"condition has length {c.shape[-1]}, target expects {self.cond_dim}")
        return c @ self.condition_map.T

    def shifted_means(self, c) -> np.ndarray:
        return self.means + self.shift(c)

    def sample(self, rng: np.random.Generator, n: int, c) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` samples of ``target(c)``; returns ``(samples, component indices)``."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        x0 = self.shifted_means(c)[comp] + np.sqrt(self.variances[comp]) * noise
        return x0, comp

    def logpdf(self, xs, cs) -> np.ndarray:
        """Log density of ``target(c_i)`` at ``x_i`` for each row."""
        xs = np.ascontiguousarray(np.atleast_2d(xs), dtype=np.float64)
        shift = np.ascontiguousarray(np.broadcast_to(self.shift(cs), xs.shape))
        if np.all(self.variances > 0):
            return _backend.gmm_logpdf_batch(xs, shift, self.log_weights, self.means, self.variances)
        return _logpdf_degenerate(self, xs, shift)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "condition_map": self.condition_map.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixtureTarget":
        means = np.atleast_2d(np.array(data["means"], dtype=np.float64))
        cmap = data.get("condition_map")
        if cmap is None:
            cmap = np.zeros((means.shape[1], 0))
        return cls(data["weights"], means, data["variances"], cmap)


def _logpdf_degenerate(target, xs, shift):
    # point-mass coordinates: density is infinite on the atom and zero elsewhere
    var = target.variances
    r = xs[:, None, :] - target.means[None] - shift[:, None, :]
    point = var[None] == 0
    hit = np.all(np.where(point, r == 0, True), axis=2) & np.any(point, axis=2)
    safe_var = np.where(point, 1.0, var)[None]
    ll = target.log_weights[None] - 0.5 * np.sum(
        np.where(point, 0.0, np.log(2 * np.pi * safe_var) + r * r / safe_var), axis=2)
    ll = np.where(np.any(point, axis=2) & ~hit, -np.inf, ll)
    out = np.empty(xs.shape[0])
    for i in range(xs.shape[0]):
        if np.any(hit[i] & (target.weights > 0)):
            out[i] = np.inf
            continue
        row = ll[i]
        top = row.max()
        out[i] = -np.inf if top == -np.inf else top + np.log(np.sum(np.exp(row - top)))
    return out


def gmm_velocity(target: GaussianMixtureTarget, x, t: float, c, t_min: float = DEFAULT_T_MIN) -> np.ndarray:
    """Exact marginal velocity ``E[eps - x0 | x_t = x]`` for ``target(c)``."""
    return gmm_velocity_batch(target, np.asarray(x, dtype=np.float64)[None, :], t,
                              np.asarray(c, dtype=np.float64)[None, :], t_min)[0]


def gmm_velocity_batch(target: GaussianMixtureTarget, xs, t: float, cs, t_min: float = DEFAULT_T_MIN) -> np.ndarray:
    if not t_min <= t <= 1.0:
        raise DomainError(f"t={t} outside [t_min={t_min}, 1]")
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != target.dim:
        raise DomainError(f"states must have shape (n, {target.dim}), got {xs.shape}")
    shift = np.ascontiguousarray(np.broadcast_to(target.shift(cs), xs.shape))
    return _backend.gmm_velocity_batch(xs, float(t), shift, target.log_weights, target.means, target.variances)


class GaussianMixtureField(VelocityField):
    def __init__(self, target: GaussianMixtureTarget, t_min: float = DEFAULT_T_MIN):
        self.target = target
        self.t_min = t_min
        self.dim = target.dim
        self.cond_dim = target.cond_dim

    def evaluate(self, x, t, c):
        return gmm_velocity(self.target, x, t, c, self.t_min)

    def evaluate_batch(self, xs, t, cs):
        return gmm_velocity_batch(self.target, xs, t, cs, self.t_min)


@dataclass(frozen=True)
class OracleEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    ess: float


def mc_velocity_oracle(target: GaussianMixtureTarget, x, t: float, c, n: int = 100_000, h: float = 0.05,
                       seed=None, min_ess: float = 100.0) -> OracleEstimate:
    """Kernel-conditioned Monte Carlo estimate of ``E[eps - x0 | x_t ~= x]``.

    Draws ``n`` pairs ``(x0, eps)``, forms ``x_t = (1-t) x0 + t eps`` and
    weights each pair by a Gaussian kernel of bandwidth ``h`` around ``x``.
    Returns the self-normalized weighted mean of ``eps - x0`` with its delta-
    method standard error. The kernel smoothing biases the estimate by
    ``O(h^2)``.
    """
    if n < 10_000:
        raise DomainError(f"oracle needs n >= 1e4 samples, got {n}")
    if h <= 0:
        raise DomainError("bandwidth must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    x0, _ = target.sample(rng, n, c)
    eps = rng.standard_normal(x0.shape)
    xt = (1.0 - t) * x0 + t * eps
    logk = -0.5 * np.sum((xt - x) ** 2, axis=1) / (h * h)
    k = np.exp(logk - logk.max())
    ess = k.sum() ** 2 / np.sum(k * k)
    if ess < min_ess:
        raise UnreliableEstimateError(f"effective sample size {ess:.1f} < {min_ess} at x={x}, t={t}")
    wts = k / k.sum()
    y = eps - x0
    mean = wts @ y
    stderr = np.sqrt(wts @ ((y - mean) ** 2 * wts[:, None]))
    return OracleEstimate(mean, stderr, float(ess))
