"""Experiment configuration files (JSON, schema-versioned).

The accepted layout is ``config_schema.json`` next to this module; unknown
keys are rejected at every level. :class:`ExperimentConfig` holds the
parsed file with all defaults filled in, so serializing it gives the fully
resolved configuration.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .core import AlphaDensity, TimeGrid, WeightSchedule, density_preset, weight_preset
from .errors import ConfigurationError, SegflowError
from .fields import DEFAULT_T_MIN, GaussianMixtureField, GaussianMixtureTarget
from .trainer import TrainConfig, load_checkpoint
from .transport import TransportConfig

SCHEMA_VERSION = 1

TRANSPORT_DEFAULTS = {
    "variant": "A",
    "k": 4,
    "density": "paper-image",
    "midpoint_share": 0.5,
    "weights": "paper-image",
    "steps": 28,
    "estimator": "grid",
    "mc_samples": 1000,
    "cutoff": None,
}
TRAIN_DEFAULTS = {
    "batch_size": 256,
    "steps": 5000,
    "learning_rate": 1e-3,
    "optimizer": "adam",
    "seed": 0,
    "hidden": [64, 64],
    "cond_scale": 1.0,
    "checkpoint": "model.bin",
}
TOLERANCE_DEFAULTS = {
    "gradcheck_rtol": 1e-4,
    "oracle_rel": 0.02,
    "oracle_nsigma": 3.0,
    "oracle_min_fraction": 0.96,
    "oracle_probes": 10,
    "norm_slope_tol": 0.2,
    "kl_ratio_tol": 0.05,
    "kl_sigma": 0.01,
}


class ConfigError(ConfigurationError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@lru_cache(maxsize=None)
def schema() -> dict:
    return json.loads(resources.files("segflow").joinpath("config_schema.json").read_text())


def _path(error) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    target: dict | None = None
    field: dict = dc_field(default_factory=lambda: {"kind": "analytic"})
    t_min: float = DEFAULT_T_MIN
    conditions: dict | None = None
    transport: dict = dc_field(default_factory=lambda: dict(TRANSPORT_DEFAULTS))
    train: dict | None = None
    seeds: list = dc_field(default_factory=lambda: [0])
    samples_per_seed: int = 8
    output_dir: str = "runs"
    tolerances: dict = dc_field(default_factory=lambda: dict(TOLERANCE_DEFAULTS))
    base_dir: Path = dc_field(default=Path("."), compare=False, repr=False)

    # ---------------------------------------------------------------- parsing

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        validator = jsonschema.Draft202012Validator(schema())
        errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), e.message))
        if errors:
            err = errors[0]
            if err.validator == "required":
                missing = err.message.split("'")[1] if "'" in err.message else err.message
                where = _path(err)
                raise ConfigError(where if where != "<root>" else "", f"missing required field {missing!r}")
            if err.validator == "additionalProperties":
                raise ConfigError(_path(err), f"unknown key: {err.message}")
            raise ConfigError(_path(err), err.message)
        data = copy.deepcopy(data)
        cfg = cls(
            schema_version=data["schema_version"],
            target=data.get("target"),
            field=data.get("field", {"kind": "analytic"}),
            t_min=data.get("t_min", DEFAULT_T_MIN),
            conditions=data.get("conditions"),
            transport={**TRANSPORT_DEFAULTS, **data.get("transport", {})},
            train={**TRAIN_DEFAULTS, **data["train"]} if "train" in data else None,
            seeds=data.get("seeds", [0]),
            samples_per_seed=data.get("samples_per_seed", 8),
            output_dir=data.get("output_dir", "runs"),
            tolerances={**TOLERANCE_DEFAULTS, **data.get("tolerances", {})},
            base_dir=Path(base_dir),
        )
        cfg._semantic_checks()
        return cfg

    @classmethod
    def loads(cls, text: str, base_dir=".") -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}", exc.msg) from None
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        return cls.from_dict(data, base_dir)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None
        try:
            return cls.loads(text, path.parent)
        except ConfigError as exc:
            raise ConfigError(str(path), str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        for key in ("target", "conditions", "train"):
            if out[key] is None:
                out.pop(key)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def _semantic_checks(self) -> None:
        try:
            target = self.build_target() if self.target is not None else None
            self.transport_config(0)
            if self.train is not None:
                self.train_config()
        except ConfigError:
            raise
        except SegflowError as exc:
            raise ConfigError(self._blame(exc), str(exc)) from None
        if self.field["kind"] == "checkpoint" and "path" not in self.field:
            raise ConfigError("field", "missing required field 'path' for a checkpoint field")
        if target is not None and self.conditions is not None:
            for key in ("a", "b"):
                if len(self.conditions[key]) != target.cond_dim:
                    raise ConfigError(f"conditions.{key}",
                                      f"length {len(self.conditions[key])} != condition_map columns "
                                      f"({target.cond_dim})")

    @staticmethod
    def _blame(exc) -> str:
        msg = str(exc)
        if "mixture" in msg:
            return "target"
        if "density" in msg or "piece" in msg or "atom" in msg:
            return "transport.density"
        if "weight" in msg or "breakpoint" in msg:
            return "transport.weights"
        return "<config>"

    # ---------------------------------------------------------------- builders

    def require(self, section: str):
        value = getattr(self, section)
        if value is None:
            raise ConfigError("", f"missing required field {section!r}")
        return value

    def build_target(self) -> GaussianMixtureTarget:
        return GaussianMixtureTarget.from_dict(self.require("target"))

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def build_field(self):
        if self.field["kind"] == "checkpoint":
            return load_checkpoint(self.resolve_path(self.field["path"]))
        return GaussianMixtureField(self.build_target(), self.t_min)

    def condition_pair(self) -> tuple[np.ndarray, np.ndarray]:
        conds = self.require("conditions")
        return np.array(conds["a"], dtype=np.float64), np.array(conds["b"], dtype=np.float64)

    def density(self) -> AlphaDensity:
        spec = self.transport["density"]
        return density_preset(spec) if isinstance(spec, str) else AlphaDensity.from_dict(spec)

    def weights(self) -> WeightSchedule:
        spec = self.transport["weights"]
        if isinstance(spec, str):
            return weight_preset(spec)
        if isinstance(spec, (int, float)):
            return WeightSchedule.constant(float(spec))
        return WeightSchedule.from_dict(spec)

    def transport_config(self, seed: int, variant: str | None = None) -> TransportConfig:
        t = self.transport
        return TransportConfig(
            variant=variant or t["variant"], k=t["k"], density=self.density(),
            midpoint_share=t["midpoint_share"], weights=self.weights(),
            grid=TimeGrid.uniform(t["steps"]), estimator=t["estimator"],
            mc_samples=t["mc_samples"], cutoff=t["cutoff"], seed=seed)

    def train_config(self) -> TrainConfig:
        tr = self.require("train")
        return TrainConfig(batch_size=tr["batch_size"], steps=tr["steps"], learning_rate=tr["learning_rate"],
                           optimizer=tr["optimizer"], seed=tr["seed"], hidden=tuple(tr["hidden"]),
                           t_min=self.t_min, cond_scale=tr["cond_scale"])
