"""Seeded experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .core import TimeGrid, WeightSchedule
from .diagnostics import (
    Check,
    gradcheck,
    loglog_slope,
    midpoint_nll,
    norm_derivative_residual,
    numerical_kl,
    kl_proxy,
    point_set,
    transport_kl_proxy,
)
from .errors import UnreliableEstimateError
from .fields import GaussianMixtureTarget, VelocityField, gmm_velocity, mc_velocity_oracle
from .trainer import MLPField, sample_batch
from .transport import TransportConfig, VARIANTS, run_joint


def max_workers(n_tasks: int) -> int:
    cap = os.environ.get("SEGFLOW_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(n_tasks, limit))


def map_seeds(fn, seeds):
    """Apply ``fn`` to every seed, concurrently, returning results in seed order."""
    seeds = list(seeds)
    if max_workers(len(seeds)) == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=max_workers(len(seeds))) as pool:
        return list(pool.map(fn, seeds))


def initial_states(seed: int, dim: int, n: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, dim))


# --------------------------------------------------------------------------
# benchmark problems


def two_mixture_benchmark() -> tuple[GaussianMixtureTarget, np.ndarray, np.ndarray]:
    """Symmetric 2-D two-mode mixture; the two conditions shift it in opposite directions.

    Under the interpolated condition the modes sit at (+-1.5, 0); each endpoint
    condition moves both modes by one unit along the mode axis, so independent
    sampling from the two conditions often lands on different modes.
    """
    target = GaussianMixtureTarget(
        weights=[0.5, 0.5],
        means=[[-1.5, 0.0], [1.5, 0.0]],
        variances=[[0.1, 0.1], [0.1, 0.1]],
        condition_map=np.eye(2),
    )
    return target, np.array([-1.0, 0.0]), np.array([1.0, 0.0])


def skewed_benchmark() -> tuple[GaussianMixtureTarget, np.ndarray, np.ndarray]:
    """Asymmetric 2-D mixture where the segment rotates while it is transported."""
    target = GaussianMixtureTarget(
        weights=[0.4, 0.6],
        means=[[-1.5, 0.3], [1.2, -0.4]],
        variances=[[0.1, 0.2], [0.3, 0.05]],
        condition_map=[[1.0, 0.3], [-0.2, 1.0]],
    )
    return target, np.array([-1.0, 0.5]), np.array([1.0, -0.3])


def single_gaussian_1d() -> GaussianMixtureTarget:
    return GaussianMixtureTarget([1.0], [[0.5]], [[0.25]], np.zeros((1, 0)))


# --------------------------------------------------------------------------
# ablation


def _variant_seed(field, target, ca, cb, cfg: TransportConfig, seed: int, samples: int, kl_sigma: float) -> dict:
    norms, nlls, kls = [], [], []
    for x0 in initial_states(seed, field.dim, samples):
        xa, xb, log = run_joint(field, ca, cb, cfg, x0)
        norms.append(float(np.linalg.norm(xb - xa)))
        nlls.append(midpoint_nll(target, ca, cb, xa, xb))
        kls.append(transport_kl_proxy(field, log, ca, cb, cfg.density, cfg.k, kl_sigma))
    return {"seed": seed, "final_norm": float(np.mean(norms)), "midpoint_nll": float(np.mean(nlls)),
            "kl_proxy": float(np.mean(kls))}


def ablation(field: VelocityField, target: GaussianMixtureTarget, ca, cb, base: TransportConfig, seeds,
             samples_per_seed: int = 8, kl_sigma: float = 0.01, variants=VARIANTS) -> dict:
    """Run every variant on identical seeds; per seed, metrics are means over ``samples_per_seed`` draws."""
    per_variant = {}
    for v in variants:
        cfg = base.with_variant(v)
        per_variant[v] = map_seeds(
            lambda s, cfg=cfg: _variant_seed(field, target, ca, cb, cfg, s, samples_per_seed, kl_sigma), seeds)
    return per_variant


def summarize_ablation(per_variant: dict) -> dict:
    rows = []
    for v, runs in per_variant.items():
        row = {"variant": v, "n_seeds": len(runs)}
        for key in ("final_norm", "midpoint_nll", "kl_proxy"):
            vals = np.array([r[key] for r in runs])
            row[f"{key}_mean"] = float(vals.mean())
            if len(runs) > 1:
                row[f"{key}_std"] = float(vals.std(ddof=1))
        rows.append(row)
    out = {"rows": rows, "ordering_by_midpoint_nll": [r["variant"] for r in sorted(rows, key=lambda r: r["midpoint_nll_mean"])]}
    if "A" in per_variant and "D" in per_variant:
        a = np.array([r["midpoint_nll"] for r in per_variant["A"]])
        d = np.array([r["midpoint_nll"] for r in per_variant["D"]])
        out["fraction_seeds_A_below_D"] = float(np.mean(a < d))
    return out


def smoothing_norm_comparison(field, ca, cb, base: TransportConfig, seeds, w_on: float = 0.7,
                              w_off: float = 0.0) -> np.ndarray:
    """Per seed, ``(final norm with w=w_on, final norm with w=w_off)``."""
    on = replace(base, variant="A", weights=WeightSchedule.constant(w_on))
    off = replace(base, variant="A", weights=WeightSchedule.constant(w_off))

    def one(seed):
        x0 = initial_states(seed, field.dim)[0]
        return [np.linalg.norm(np.subtract(*run_joint(field, ca, cb, cfg, x0)[:2])) for cfg in (on, off)]

    return np.array(map_seeds(one, seeds))


# --------------------------------------------------------------------------
# diagnostic checks


def oracle_probe(target: GaussianMixtureTarget, rng, t_range=(0.2, 1.0)):
    """A random ``(x, t, c)`` with ``x`` drawn from the noised marginal at ``t``."""
    t = float(rng.uniform(*t_range))
    c = rng.uniform(-1.0, 1.0, size=target.cond_dim)
    x0, _ = target.sample(rng, 1, c)
    return (1 - t) * x0[0] + t * rng.standard_normal(target.dim), t, c


def oracle_agreement(target, n_probes: int, seed: int = 0, n: int = 100_000, h: float = 0.05,
                     nsigma: float = 3.0, rel: float = 0.02) -> tuple[list[dict], int]:
    """Compare :func:`gmm_velocity` with the kernel oracle on ``n_probes`` random probes.

    Probes where the oracle reports an unreliable estimate (too few samples
    land near ``x``) carry no information about agreement; they are redrawn,
    at most ``3 * n_probes`` times, and the redraw count is returned alongside
    the per-probe rows.
    """
    rng = np.random.default_rng(seed)
    rows, redrawn = [], 0
    while len(rows) < n_probes:
        x, t, c = oracle_probe(target, rng)
        exact = gmm_velocity(target, x, t, c)
        try:
            est = mc_velocity_oracle(target, x, t, c, n=n, h=h, seed=np.random.default_rng([seed, len(rows), redrawn]))
        except UnreliableEstimateError:
            redrawn += 1
            if redrawn > 3 * n_probes:
                raise
            continue
        tol = np.maximum(nsigma * est.stderr, rel * np.abs(exact))
        rows.append({"x": x.tolist(), "t": t, "c": c.tolist(), "exact": exact.tolist(), "estimate": est.mean.tolist(),
                     "stderr": est.stderr.tolist(), "ok": bool(np.all(np.abs(exact - est.mean) <= tol))})
    return rows, redrawn


def check_oracle(target, tol: dict, seed: int = 0) -> Check:
    rows, redrawn = oracle_agreement(target, tol["oracle_probes"], seed, nsigma=tol["oracle_nsigma"],
                                     rel=tol["oracle_rel"])
    frac = float(np.mean([r["ok"] for r in rows]))
    return Check("field_vs_oracle", {"probes": len(rows), "n": 100_000, "h": 0.05},
                 {"fraction_agree": frac, "redrawn_unreliable": redrawn}, tol["oracle_min_fraction"],
                 frac >= tol["oracle_min_fraction"])


def check_gradients(tol: dict, n_nets: int = 5, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    target = GaussianMixtureTarget([0.5, 0.5], [[-1.0, 0.5], [1.0, -0.5]], [[0.2, 0.1], [0.1, 0.3]],
                                   [[1.0], [0.5]])
    worst = 0.0
    for i in range(n_nets):
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3)))
        field = MLPField.create(2, 1, hidden, seed=int(rng.integers(1 << 31)))
        batch = sample_batch(target, rng, int(rng.integers(1, 9)))
        worst = max(worst, gradcheck(field, batch))
    return Check("gradcheck", {"networks": n_nets, "h": 1e-5}, {"max_relative_error": worst},
                 tol["gradcheck_rtol"], worst <= tol["gradcheck_rtol"])


def norm_residual_scaling(field, ca, cb, base: TransportConfig, seeds, steps=(28, 56, 112)):
    """Max norm-derivative residual of variant-A runs for each grid size."""
    maxima = []
    for n in steps:
        cfg = replace(base, variant="A", grid=TimeGrid.uniform(n))
        worst = 0.0
        for seed in seeds:
            log = run_joint(field, ca, cb, cfg, initial_states(seed, field.dim)[0])[2]
            res = norm_derivative_residual(log)
            if not res.empty:
                worst = max(worst, res.max)
        maxima.append(worst)
    dts = [1.0 / n for n in steps]
    return dts, maxima


def check_norm_residual(field, ca, cb, base: TransportConfig, tol: dict, seeds=(0, 1, 2, 3)) -> Check:
    dts, maxima = norm_residual_scaling(field, ca, cb, base, seeds)
    exact = maxima[-1] < 1e-9  # segment dynamics exactly linear: nothing to scale
    slope = loglog_slope(dts, maxima) if min(maxima) > 0 else float("nan")
    ok = exact or abs(slope - 1.0) <= tol["norm_slope_tol"]
    return Check("norm_derivative_scaling", {"dts": dts, "seeds": list(seeds)},
                 {"max_residuals": maxima, "slope": slope, "exact": exact}, tol["norm_slope_tol"], bool(ok))


def kl_two_atom_case(sigma: float, perturb=(0.1, 0.1)):
    alphas, weights = np.array([0.2, 0.8]), np.array([0.5, 0.5])
    true = point_set(alphas, weights, alphas)  # segment [0, 1]
    approx = point_set(alphas, weights, (1 - alphas) * perturb[0] + alphas * (1 + perturb[1]))
    return kl_proxy(true, approx, sigma), numerical_kl(true, approx, sigma)


def check_kl(tol: dict) -> Check:
    proxy, numeric = kl_two_atom_case(tol["kl_sigma"])
    ratio = proxy / numeric
    return Check("kl_leading_order", {"sigma": tol["kl_sigma"], "perturbation": 0.1},
                 {"proxy": proxy, "numerical": numeric, "ratio": ratio}, tol["kl_ratio_tol"],
                 abs(ratio - 1.0) <= tol["kl_ratio_tol"])
