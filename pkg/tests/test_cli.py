import json
import subprocess
import sys

import pytest
import yaml

from varfilter.cli import DEFAULTS, ConfigError, load_config, main
from varfilter.data import load_dataset

SMALL = {
    "seed": 3,
    "model": {"latent_dim": 3, "hidden_dim": 8, "width": 8},
    "inference": {"K": 1, "width": 8},
    "training": {"epochs": 2, "batch_size": 4, "shard_size": 2, "learning_rate": 1e-2},
    "data": {"train": "data/train.jsonl", "validation": "data/val.jsonl",
             "generator": {"n_train": 6, "n_validation": 3, "T": 5}},
    "output": {"metrics": "out/metrics.jsonl", "checkpoint": "out/ck.json", "filter": "out/filter.jsonl"},
}


def write_config(tmp_path, cfg=SMALL, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture
def run_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("VARFILTER_THREADS", raising=False)
    return tmp_path


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_load_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None)
    assert cfg == DEFAULTS
    cfg = load_config(write_config(tmp_path), ["training.epochs=7", "inference.n_samples=3"])
    assert cfg["training"]["epochs"] == 7 and cfg["inference"]["n_samples"] == 3
    assert cfg["model"]["latent_dim"] == 3 and cfg["model"]["kind"] == "deep"
    assert load_config(None, ["training.learning_rate=1e-4"])["training"]["learning_rate"] == 1e-4


@pytest.mark.parametrize("override,match", [
    ("training.epochz=3", "unknown config key 'training.epochz'"),
    ("inference.strategy=mcmc", "inference.strategy"),
    ("training.epochs=many", "training.epochs"),
    ("training.learning_rate=fast", "training.learning_rate"),
    ("nokey", "key=value"),
])
def test_load_config_rejects_bad_values(override, match):
    with pytest.raises(ConfigError, match=match):
        load_config(None, [override])


def test_full_pipeline(run_dir, capsys):
    cfg = write_config(run_dir)
    assert main(["generate", "-c", cfg]) == 0
    assert len(load_dataset("data/train.jsonl")) == 6 and len(load_dataset("data/val.jsonl")) == 3

    assert main(["train", "-c", cfg]) == 0
    records = read_jsonl(run_dir / "out/metrics.jsonl")
    assert [(r["epoch"], r["split"]) for r in records] == [(0, "train"), (0, "validation"),
                                                           (1, "train"), (1, "validation")]
    assert records[2]["lr"] == pytest.approx(1e-2 * 0.999)

    capsys.readouterr()
    assert main(["eval", "-c", cfg, "--checkpoint", "out/ck.json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["split"] == "validation" and len(report["iteration_free_energy"]) == 2

    assert main(["filter", "-c", cfg, "--checkpoint", "out/ck.json", "--sequences", "data/val.jsonl"]) == 0
    rows = read_jsonl(run_dir / "out/filter.jsonl")
    assert len(rows) == 3 * 5
    assert rows[0]["sequence"] == 0 and rows[0]["t"] == 1 and len(rows[0]["mean"]) == 3
    assert rows[0]["free_energy"] == pytest.approx(rows[0]["reconstruction"] + rows[0]["kl"], rel=1e-12)
    assert rows[0]["iteration_free_energy"][-1] == pytest.approx(rows[0]["free_energy"], rel=1e-12)


def test_zero_epochs_writes_empty_metrics(run_dir):
    cfg = write_config(run_dir)
    main(["generate", "-c", cfg])
    assert main(["train", "-c", cfg, "--set", "training.epochs=0"]) == 0
    assert (run_dir / "out/metrics.jsonl").read_text() == ""
    doc = json.loads((run_dir / "out/ck.json").read_text())
    assert doc["extra"]["epochs_completed"] == 0


def test_unknown_key_exit_code(run_dir, capsys):
    bad = dict(SMALL, trainng={"epochs": 1})
    assert main(["train", "-c", write_config(run_dir, bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and "trainng" in err["message"]


def test_missing_data_and_checkpoint_mismatch(run_dir, capsys):
    cfg = write_config(run_dir)
    assert main(["train", "-c", cfg]) == 2  # configured data path does not exist
    main(["generate", "-c", cfg])
    main(["train", "-c", cfg, "--set", "training.epochs=0"])
    capsys.readouterr()
    code = main(["eval", "-c", cfg, "--checkpoint", "out/ck.json", "--set", "model.latent_dim=4"])
    assert code == 3
    assert json.loads(capsys.readouterr().err)["error"] == "ModelConfigError"


def test_malformed_dataset_exit_code(run_dir):
    cfg = write_config(run_dir)
    (run_dir / "data").mkdir()
    (run_dir / "data/train.jsonl").write_text("")
    assert main(["train", "-c", cfg]) == 3


def test_threads_from_environment(run_dir, monkeypatch):
    cfg = write_config(run_dir)
    main(["generate", "-c", cfg])
    main(["train", "-c", cfg, "--set", "output.checkpoint=out/a.json"])
    monkeypatch.setenv("VARFILTER_THREADS", "3")
    main(["train", "-c", cfg, "--set", "output.checkpoint=out/b.json"])
    a = json.loads((run_dir / "out/a.json").read_text())
    b = json.loads((run_dir / "out/b.json").read_text())
    assert a["model"] == b["model"] and a["inference_model"] == b["inference_model"]
    monkeypatch.setenv("VARFILTER_THREADS", "zero")
    assert main(["train", "-c", cfg]) == 2


def test_gradcheck_command(run_dir, capsys):
    cfg = write_config(run_dir, dict(SMALL, model={"obs_dim": 2, "latent_dim": 3, "hidden_dim": 8, "width": 8}))
    assert main(["gradcheck", "-c", cfg]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["pass"] and set(report["checks"]) >= {"theta_filter_total", "phi_post_update"}
    assert main(["gradcheck", "-c", cfg, "--set", "gradcheck.tol=1e-30"]) == 1


def test_verify_kalman_command(run_dir, capsys):
    cfg = write_config(run_dir, {"model": {"kind": "lgssm", "fixture": "scalar"},
                                 "verify": {"T": 10, "iterations": 400},
                                 "output": {"report": "out/verify.json"}})
    assert main(["verify-kalman", "-c", cfg]) == 0
    report = json.loads((run_dir / "out/verify.json").read_text())
    assert report["pass"] and len(report["steps"]) == 10
    assert report["max_mean_error"] < 1e-3 and report["max_free_energy_gap"] < 1e-4
    assert main(["verify-kalman", "-c", cfg, "--set", "verify.iterations=2"]) == 1
    assert main(["verify-kalman"]) == 2


def test_lgssm_generator_and_training(run_dir):
    cfg = write_config(run_dir, {
        "model": {"kind": "lgssm", "fixture": "4d"},
        "inference": {"K": 1, "width": 8, "expectation": "analytic",
                      "normalize_mean": False, "normalize_inputs": False},
        "training": {"epochs": 1, "batch_size": 4, "shard_size": 4, "update_model": False},
        "data": {"generator": {"kind": "lgssm", "n_train": 4, "T": 3}},
    })
    assert main(["generate", "-c", cfg]) == 0
    assert load_dataset("data/train.jsonl").obs_dim == 4
    assert main(["train", "-c", cfg]) == 0


def test_console_script_entry_point(run_dir):
    out = subprocess.run([sys.executable, "-m", "varfilter.cli", "train", "--set", "training.bogus=1"],
                         capture_output=True, text=True)
    assert out.returncode == 2
    assert json.loads(out.stderr)["error"] == "ConfigError"
