import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from segflow.cli import main
from segflow.trainer import MLPField, save_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


@pytest.fixture
def default_cfg():
    return json.loads((CONFIGS / "default.json").read_text())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_writes_checkpoint_and_decreasing_loss(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "train_1d.json").read_text())
    cfg["train"].update({"steps": 300, "hidden": [16, 16], "batch_size": 128})
    out = tmp_path / "out"
    assert main(["train", "--config", str(write_config(tmp_path, cfg)), "--out", str(out)]) == 0
    assert (out / "model.bin").stat().st_size > 0
    losses = np.array([float(r["loss"]) for r in read_csv(out / "loss.csv")])
    assert losses.size == 300
    windows = losses.reshape(6, 50).mean(axis=1)
    assert windows[-1] < windows[0]
    report = json.loads((out / "train.json").read_text())
    assert report["steps"] == 300 and report["ratio"] > 0
    assert "analytic floor" in capsys.readouterr().out


def test_missing_target_exits_2_naming_field(tmp_path, default_cfg, capsys):
    del default_cfg["target"]
    code = main(["ablate", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "target" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_dry_run_writes_nothing(tmp_path, default_cfg, capsys):
    out = tmp_path / "o"
    assert main(["joint", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["transport"]["estimator"] == "grid"


def test_joint_variant_d_with_zero_cutoff(tmp_path, default_cfg):
    default_cfg["transport"].update({"variant": "D", "cutoff": 0})
    default_cfg["seeds"] = [0, 1]
    out = tmp_path / "o"
    assert main(["joint", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(out)]) == 0
    for seed in (0, 1):
        rows = read_csv(out / f"seed_{seed}" / "trajectory.csv")
        assert len(rows) == 28 and all(float(r["w"]) == 0.0 for r in rows)
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["completed"] == 2 and agg["failed"] == [] and agg["final_norm_std"] is not None


def test_joint_uses_image_schedule(tmp_path, default_cfg):
    default_cfg["seeds"] = [0]
    out = tmp_path / "o"
    assert main(["joint", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(out)]) == 0
    ws = [float(r["w"]) for r in read_csv(out / "seed_0" / "trajectory.csv")]
    assert ws[:7] == [0.7] * 7 and ws[7:9] == [0.5, 0.4] and set(ws[9:]) == {0.1}


def test_sample_writes_both_base_paths(tmp_path, default_cfg):
    out = tmp_path / "o"
    assert main(["sample", "--config", str(write_config(tmp_path, default_cfg)), "--seed", "2", "--out", str(out)]) == 0
    a = read_csv(out / "seed_2" / "base_a.csv")
    b = read_csv(out / "seed_2" / "base_b.csv")
    assert len(a) == len(b) == 29
    assert (a[0]["x_0"], a[0]["x_1"]) == (b[0]["x_0"], b[0]["x_1"])  # same starting noise
    assert a[-1] != b[-1]


def test_single_seed_ablation_has_no_spread_columns(tmp_path, default_cfg, capsys):
    default_cfg["samples_per_seed"] = 2
    out = tmp_path / "o"
    assert main(["ablate", "--config", str(write_config(tmp_path, default_cfg)), "--seed", "0", "--out", str(out)]) == 0
    rows = read_csv(out / "ablation.csv")
    assert [r["variant"] for r in rows] == ["A", "B", "C", "D"]
    assert not any(key.endswith("_std") for key in rows[0])
    assert "ordering by midpoint NLL" in capsys.readouterr().out


def test_unknown_variant_exits_2(tmp_path, default_cfg):
    default_cfg["transport"]["variant"] = "E"
    assert main(["joint", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(tmp_path / "o")]) == 2


def test_negative_seed_exits_2(tmp_path):
    assert main(["joint", "--seed", "-1", "--out", str(tmp_path / "o")]) == 2


def test_default_config_diagnose_passes(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["diagnose", "--out", str(out)]) == 0
    report = json.loads((out / "diagnostics.json").read_text())
    assert report["passed"] and len(report["checks"]) == 4
    assert capsys.readouterr().out.count("PASS") == 4


def test_zero_tolerance_diagnose_exits_4_and_keeps_report(tmp_path, default_cfg):
    default_cfg["tolerances"] = {"norm_slope_tol": 0.0, "kl_ratio_tol": 0.0, "oracle_probes": 3}
    default_cfg["target"] = {"weights": [0.5, 0.5], "means": [[-1.5, 0.0], [1.5, 0.0]],
                             "variances": [[0.1, 0.1], [0.1, 0.1]], "condition_map": [[1.0, 0.0], [0.0, 1.0]]}
    out = tmp_path / "o"
    assert main(["diagnose", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(out)]) == 4
    report = json.loads((out / "diagnostics.json").read_text())
    assert report["passed"] is False


def test_corrupted_checkpoint_exits_2_naming_file(tmp_path, default_cfg, capsys):
    (tmp_path / "broken.bin").write_bytes(b"not a checkpoint")
    default_cfg["field"] = {"kind": "checkpoint", "path": "broken.bin"}
    assert main(["joint", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(tmp_path / "o")]) == 2
    assert "broken.bin" in capsys.readouterr().err


def test_checkpoint_field_drives_joint(tmp_path, default_cfg):
    field = MLPField.create(2, 2, (4,), seed=0)
    save_checkpoint(field, tmp_path / "m.bin")
    default_cfg["field"] = {"kind": "checkpoint", "path": "m.bin"}
    default_cfg["seeds"] = [0]
    assert main(["joint", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(tmp_path / "o")]) == 0


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_non_finite_velocities_exit_3_per_seed(tmp_path, default_cfg):
    field = MLPField.create(2, 2, (4,), seed=0)
    field.set_flat(np.full(field.n_params(), 1e308))  # the output layer overflows
    save_checkpoint(field, tmp_path / "huge.bin")
    default_cfg["field"] = {"kind": "checkpoint", "path": "huge.bin"}
    default_cfg["seeds"] = [0, 1]
    out = tmp_path / "o"
    assert main(["joint", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(out)]) == 3
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["completed"] == 0 and len(agg["failed"]) == 2
    assert "error" in json.loads((out / "seed_1" / "summary.json").read_text())


def test_training_divergence_exits_3(tmp_path, default_cfg):
    default_cfg["train"].update({"optimizer": "sgd", "learning_rate": 1e6, "steps": 200, "hidden": [8]})
    assert main(["train", "--config", str(write_config(tmp_path, default_cfg)), "--out", str(tmp_path / "o")]) == 3


def test_thread_count_does_not_change_outputs(tmp_path, default_cfg):
    default_cfg["seeds"] = [0, 1, 2]
    path = write_config(tmp_path, default_cfg)
    env = dict(os.environ)
    outputs = []
    for threads in ("1", "4"):
        out = tmp_path / f"t{threads}"
        env["SEGFLOW_THREADS"] = threads
        subprocess.run([sys.executable, "-m", "segflow", "joint", "--config", str(path), "--out", str(out)],
                       env=env, check=True, capture_output=True)
        outputs.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    assert outputs[0] and outputs[0] == outputs[1]
