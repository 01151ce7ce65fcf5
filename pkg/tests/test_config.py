import json
from importlib import resources

import numpy as np
import pytest

from segflow.config import ConfigError, ExperimentConfig
from segflow.core import WeightSchedule, density_preset, weight_preset

TARGET = {"weights": [1.0], "means": [[0.0, 0.0]], "variances": [[0.5, 0.5]], "condition_map": [[1.0], [0.0]]}


def minimal(**extra):
    return {"schema_version": 1, "target": TARGET, "conditions": {"a": [-1.0], "b": [1.0]}, **extra}


def test_packaged_default_roundtrips():
    text = resources.files("segflow").joinpath("default_config.json").read_text()
    cfg = ExperimentConfig.loads(text)
    again = ExperimentConfig.loads(cfg.dumps())
    assert again == cfg and again.dumps() == cfg.dumps()


def test_defaults_are_filled_in():
    cfg = ExperimentConfig.from_dict(minimal())
    data = cfg.to_dict()
    assert data["transport"]["variant"] == "A" and data["transport"]["steps"] == 28
    assert data["tolerances"]["gradcheck_rtol"] == 1e-4
    assert "train" not in data


def test_unknown_keys_rejected_at_any_level():
    with pytest.raises(ConfigError, match="unknown key"):
        ExperimentConfig.from_dict(minimal(extra=1))
    with pytest.raises(ConfigError, match="transport"):
        ExperimentConfig.from_dict(minimal(transport={"varient": "A"}))


def test_missing_schema_version():
    data = minimal()
    del data["schema_version"]
    with pytest.raises(ConfigError, match="schema_version"):
        ExperimentConfig.from_dict(data)


def test_json_errors_carry_line_and_column():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.loads('{\n  "schema_version": 1,\n  oops\n}')
    assert "line 3" in str(info.value) and "column" in str(info.value)


def test_load_prefixes_file_name(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(minimal(seeds="zero")))
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(path)
    assert "bad.json" in str(info.value) and "seeds" in str(info.value)
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.load(tmp_path / "absent.json")


def test_condition_length_must_match_target():
    data = minimal(conditions={"a": [0.0, 1.0], "b": [1.0]})
    with pytest.raises(ConfigError, match="conditions.a"):
        ExperimentConfig.from_dict(data)


def test_invalid_target_is_blamed():
    bad = dict(TARGET, weights=[0.7])
    with pytest.raises(ConfigError, match="target"):
        ExperimentConfig.from_dict(minimal(target=bad))


@pytest.mark.parametrize("spec,expected", [
    ("paper-video", weight_preset("paper-video")),
    (0.3, WeightSchedule.constant(0.3)),
    ({"breakpoints": [[3, 0.5], [None, 0.2]]}, WeightSchedule(((3, 0.5), (None, 0.2)))),
])
def test_weight_specs(spec, expected):
    cfg = ExperimentConfig.from_dict(minimal(transport={"weights": spec}))
    assert cfg.weights() == expected


def test_density_specs():
    cfg = ExperimentConfig.from_dict(minimal(transport={"density": "paper-image"}))
    assert cfg.density() == density_preset("paper-image")
    cfg = ExperimentConfig.from_dict(minimal(transport={"density": {"pieces": [[0.0, 1.0, 1.0]]}}))
    assert cfg.density().pieces == ((0.0, 1.0, 1.0),)


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(minimal(transport={"density": "no-such-preset"}))


def test_checkpoint_field_needs_path():
    with pytest.raises(ConfigError, match="path"):
        ExperimentConfig.from_dict(minimal(field={"kind": "checkpoint"}))


def test_checkpoint_path_is_relative_to_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(minimal(field={"kind": "checkpoint", "path": "m.bin"})))
    cfg = ExperimentConfig.load(path)
    assert cfg.resolve_path("m.bin") == tmp_path / "m.bin"


def test_require_names_missing_section():
    cfg = ExperimentConfig.from_dict({"schema_version": 1})
    with pytest.raises(ConfigError, match="'target'"):
        cfg.build_target()
    with pytest.raises(ConfigError, match="'conditions'"):
        cfg.condition_pair()


def test_builders():
    cfg = ExperimentConfig.from_dict(minimal(train={"steps": 10, "hidden": [4]}, seeds=[3, 4]))
    ca, cb = cfg.condition_pair()
    assert np.array_equal(ca, [-1.0]) and np.array_equal(cb, [1.0])
    tc = cfg.transport_config(5, variant="D")
    assert tc.variant == "D" and tc.seed == 5 and tc.grid.n_steps == 28
    assert cfg.train_config().hidden == (4,) and cfg.train_config().steps == 10
