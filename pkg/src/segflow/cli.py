"""Command-line experiment runner.

    segflow train|sample|joint|ablate|diagnose [--config PATH] [--seed N] [--out DIR] [--dry-run]

Without ``--config`` the packaged default configuration is used. Outputs go
to ``--out`` (or the config's ``output_dir``, relative to the working
directory). Exit codes: 0 success, 2 configuration error, 3 numerical
divergence, 4 diagnostic failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig
from .core import fmt_float
from .diagnostics import DiagnosticReport, _jsonable
from .errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateDensityError,
    DivergenceError,
    DomainError,
    PropagationError,
    SegflowError,
)
from .trainer import conditional_variance_floor, fm_loss, sample_batch, save_checkpoint, train
from .transport import VARIANTS, run_joint, sample_base

log = logging.getLogger("segflow")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_DIAGNOSTIC = 0, 2, 3, 4
NUMERICAL_ERRORS = (DivergenceError, PropagationError, DegenerateDensityError, ArithmeticError)


def default_config_text() -> str:
    return resources.files("segflow").joinpath("default_config.json").read_text()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(v if isinstance(v, str) else fmt_float(v) if isinstance(v, float) else str(v) for v in row)
              for row in rows]
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig, out: Path, seed: int | None) -> int:
    target = cfg.build_target()
    tcfg = cfg.train_config()
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    field, losses = train(target, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / cfg.train["checkpoint"]
    save_checkpoint(field, ckpt)
    write_csv(out / "loss.csv", ["step", "loss"], [(i, float(v)) for i, v in enumerate(losses)])
    held_out = sample_batch(target, np.random.default_rng([tcfg.seed, 1]), 4096, tcfg.t_min, tcfg.cond_scale)
    final, floor = fm_loss(field, held_out), conditional_variance_floor(target, held_out, tcfg.t_min)
    write_json(out / "train.json", {"checkpoint": ckpt.name, "steps": tcfg.steps, "seed": tcfg.seed,
                                    "held_out_loss": final, "analytic_floor": floor, "ratio": final / floor})
    print(f"checkpoint {ckpt}")
    print(f"held-out loss {final:.6f}  analytic floor {floor:.6f}  ratio {final / floor:.4f}")
    return EXIT_OK


def cmd_sample(cfg: ExperimentConfig, out: Path, seeds) -> int:
    field = cfg.build_field()
    ca, cb = cfg.condition_pair()
    grid = cfg.transport_config(0).grid
    times = grid.times

    def one(seed):
        x0 = ex.initial_states(seed, field.dim)[0]
        return [sample_base(field, c, grid, x0) for c in (ca, cb)]

    for seed, paths in zip(seeds, ex.map_seeds(one, seeds)):
        d = out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        for name, path in zip(("a", "b"), paths):
            header = ["step", "t"] + [f"x_{j}" for j in range(path.shape[1])]
            write_csv(d / f"base_{name}.csv", header,
                      [(i, float(times[i]), *map(float, row)) for i, row in enumerate(path)])
        print(f"seed {seed}: {d}")
    return EXIT_OK


def cmd_joint(cfg: ExperimentConfig, out: Path, seeds) -> int:
    field = cfg.build_field()
    ca, cb = cfg.condition_pair()

    def one(seed):
        tcfg = cfg.transport_config(seed)
        d = out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        try:
            _, _, traj = run_joint(field, ca, cb, tcfg, ex.initial_states(seed, field.dim)[0])
        except SegflowError as exc:
            write_json(d / "summary.json", {"seed": seed, "variant": tcfg.variant, "error": str(exc)})
            return {"seed": seed, "error": str(exc)}
        (d / "trajectory.csv").write_text(traj.to_csv())
        summary = {"seed": seed, "variant": tcfg.variant, **traj.summary()}
        write_json(d / "summary.json", summary)
        return summary

    results = ex.map_seeds(one, seeds)
    ok = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    norms = np.array([r["final_norm"] for r in ok])
    aggregate = {"variant": cfg.transport["variant"], "seeds": list(seeds), "completed": len(ok),
                 "failed": failed,
                 "final_norm_mean": float(norms.mean()) if ok else None,
                 "final_norm_std": float(norms.std(ddof=1)) if len(ok) > 1 else None}
    write_json(out / "aggregate.json", aggregate)
    for r in results:
        print(f"seed {r['seed']}: " + (f"FAILED {r['error']}" if "error" in r else f"final norm {r['final_norm']:.6g}"))
    return EXIT_DIVERGENCE if failed else EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, out: Path, seeds) -> int:
    target = cfg.build_target()
    field = cfg.build_field()
    ca, cb = cfg.condition_pair()
    per_variant = ex.ablation(field, target, ca, cb, cfg.transport_config(0), seeds, cfg.samples_per_seed,
                              cfg.tolerances["kl_sigma"], VARIANTS)
    report = ex.summarize_ablation(per_variant)
    report.update({"seeds": list(seeds), "samples_per_seed": cfg.samples_per_seed, "per_seed": per_variant})
    out.mkdir(parents=True, exist_ok=True)
    header = list(report["rows"][0].keys())
    write_csv(out / "ablation.csv", header, [[r[h] for h in header] for r in report["rows"]])
    write_json(out / "ablation.json", report)
    for r in report["rows"]:
        print(f"{r['variant']}: final norm {r['final_norm_mean']:.4g}  midpoint NLL {r['midpoint_nll_mean']:.4g}  "
              f"KL proxy {r['kl_proxy_mean']:.4g}")
    print("ordering by midpoint NLL: " + " < ".join(report["ordering_by_midpoint_nll"]))
    if "fraction_seeds_A_below_D" in report:
        print(f"seeds with A below D: {report['fraction_seeds_A_below_D']:.0%}")
    return EXIT_OK


def cmd_diagnose(cfg: ExperimentConfig, out: Path, seeds) -> int:
    tol = cfg.tolerances
    field = cfg.build_field()
    target = cfg.build_target()
    ca, cb = cfg.condition_pair()
    report = DiagnosticReport([
        ex.check_gradients(tol, seed=seeds[0]),
        ex.check_oracle(target, tol, seed=seeds[0]),
        ex.check_norm_residual(field, ca, cb, cfg.transport_config(seeds[0]), tol),
        ex.check_kl(tol),
    ])
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnostics.json").write_text(report.to_json() + "\n")
    for check in report.checks:
        print(check.line())
    return EXIT_OK if report.passed else EXIT_DIAGNOSTIC


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "joint": cmd_joint, "ablate": cmd_ablate,
            "diagnose": cmd_diagnose}
REQUIRED = {"train": ("target", "train"), "sample": ("conditions",), "joint": ("conditions",),
            "ablate": ("target", "conditions"), "diagnose": ("target", "conditions")}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segflow", description="Joint segment transport experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="experiment config (JSON); defaults to the packaged one")
    parser.add_argument("--seed", type=int, help="run this single seed instead of the config's seed list")
    parser.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the resolved config only")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(path: Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig.loads(default_config_text())
    return ExperimentConfig.load(path)


def run(args) -> int:
    cfg = load_config(args.config)
    for section in REQUIRED[args.command]:
        cfg.require(section)
    if cfg.field["kind"] == "analytic":
        cfg.require("target")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be >= 0")
        cfg.seeds = [args.seed]
    out = args.out if args.out is not None else Path(cfg.output_dir)
    if args.dry_run:
        if cfg.field["kind"] == "checkpoint":
            cfg.build_field()
        print(cfg.dumps())
        return EXIT_OK
    if args.command == "train":
        return cmd_train(cfg, out, args.seed)
    return COMMANDS[args.command](cfg, out, list(cfg.seeds))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigurationError, CheckpointError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
