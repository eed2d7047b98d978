"""Command line entry point.

    varfilter generate      --config run.yaml
    varfilter train         --config run.yaml [--threads N] [--set training.epochs=5]
    varfilter eval          --config run.yaml --checkpoint out/model.json
    varfilter filter        --config run.yaml --checkpoint out/model.json --sequences data.jsonl
    varfilter gradcheck     --config run.yaml
    varfilter verify-kalman --config run.yaml

Every run is driven by one YAML file (see ``DEFAULTS`` for the schema).
Unknown keys are rejected. Relative paths are resolved against the working
directory. Failures print one JSON object ``{"error": ..., "message": ...}``
to stderr and exit non-zero: 1 a check did not pass, 2 invalid
configuration, 3 bad input file or checkpoint, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .core import DomainError, ShapeError
from .data import (DatasetFormatError, SequenceDataset, generate_binary_sequences, generate_lgssm_data,
                   generate_oscillator_data, load_dataset, save_dataset)
from .diagnostics import gradient_suite, kalman_equivalence, lgssm_fixture
from .filtering import (AmortizedInference, GradientInference, NonFiniteFreeEnergy, TrainConfig,
                        evaluate, filter_sequence, make_optimizer, train_epoch, trainable_parameters)
from .inference import ExpectationMode, GradientEStepConfig, InferenceDivergence, IterativeInferenceModel
from .kalman import SingularInnovation
from .models import (DeepSequenceModel, LinearGaussianSSM, ModelConfigError, load_tensors,
                     read_checkpoint, save_checkpoint)

THREADS_ENV = "VARFILTER_THREADS"

DEFAULTS = {
    "seed": 0,
    "model": {
        "kind": "deep",             # deep | lgssm
        "obs_dim": None,            # taken from the data when unset
        "latent_dim": 8,
        "hidden_dim": 64,
        "width": 64,
        "output_family": "gaussian",
        "bin_width": None,          # discretized_gaussian; defaults to data range / 256
        "fixture": None,            # lgssm only: scalar | 4d, instead of explicit matrices
        "A": None, "Q_diag": None, "C": None, "b": None, "R_diag": None,
        "init_mean": None, "init_var_diag": None,
    },
    "inference": {
        "strategy": "avf",          # avf | gradient
        "K": 2,
        "expectation": "monte_carlo",
        "n_samples": 1,
        "width": 128,
        "encode_data": False,
        "normalize_mean": True,
        "normalize_inputs": True,
        "estep": {"iterations": 100, "step_size": 0.05, "optimizer": "adaptive_moments",
                  "line_search": False, "common_random_numbers": False},
    },
    "training": {"epochs": 10, "learning_rate": 1e-3, "lr_decay_per_epoch": 0.999,
                 "kl_anneal_epochs": 0, "batch_size": 64, "shard_size": 16,
                 "optimizer": "adaptive_moments", "update_model": True},
    "data": {
        "train": "data/train.jsonl",
        "validation": None,
        "generator": {"kind": "oscillator", "n_train": 500, "n_validation": 100, "T": 40,
                      "obs_dim": 2, "process_noise": 0.05, "obs_noise": 0.1, "amplitude": 1.0,
                      "flip_prob": 0.1},
    },
    "output": {"metrics": "out/metrics.jsonl", "checkpoint": "out/checkpoint.json",
               "filter": "out/filter.jsonl", "report": None},
    "verify": {"T": 50, "iterations": 500, "step_size": 0.05, "mean_tol": 1e-3,
               "free_energy_tol": 1e-4},
    "gradcheck": {"T": 4, "eps": 1e-4, "max_coords": 4, "tol": 1e-4},
}

ENUMS = {
    "model.kind": ("deep", "lgssm"),
    "model.output_family": ("gaussian", "bernoulli", "discretized_gaussian"),
    "model.fixture": (None, "scalar", "4d"),
    "inference.strategy": ("avf", "gradient"),
    "inference.expectation": ("monte_carlo", "analytic"),
    "inference.estep.optimizer": ("adaptive_moments", "plain_sgd"),
    "training.optimizer": ("adaptive_moments", "plain_sgd"),
    "data.generator.kind": ("oscillator", "lgssm", "binary"),
}
LGSSM_KEYS = ("A", "Q_diag", "C", "b", "R_diag", "init_mean", "init_var_diag")


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


# --- configuration ----------------------------------------------------------------

def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a mapping")
            out[key] = _merge(default, value, path + ".")
        else:
            out[key] = _check_type(path, default, value)
    return out


def _check_type(path: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot ("1e-6") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path!r} expects {type(default).__name__}, got {value!r}")
    return value


def _lookup(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        node = node[part]
    return node


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a raw config mapping."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {part!r} is not a section")
    node[parts[-1]] = yaml.safe_load(text)


def load_config(path, overrides=()) -> dict:
    """Read, override, merge with defaults and validate a run configuration."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {str(path)!r} does not exist")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: invalid YAML: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    cfg = _merge(DEFAULTS, raw)
    for key, allowed in ENUMS.items():
        if _lookup(cfg, key) not in allowed:
            raise ConfigError(f"{key!r} must be one of {[a for a in allowed if a]}, got {_lookup(cfg, key)!r}")
    if cfg["inference"]["K"] < 1:
        raise ConfigError("'inference.K' must be at least 1")
    if cfg["model"]["kind"] == "lgssm":
        given = [k for k in LGSSM_KEYS if cfg["model"][k] is not None]
        if cfg["model"]["fixture"] is None and len(given) != len(LGSSM_KEYS):
            missing = [k for k in LGSSM_KEYS if k not in given]
            raise ConfigError(f"lgssm model needs 'model.fixture' or all matrices; missing {missing}")
    elif cfg["inference"]["expectation"] == "analytic":
        raise ConfigError("'inference.expectation' analytic requires model.kind lgssm")
    try:
        training_config(cfg)
        estep_config(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg


def training_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["training"])


def expectation_mode(cfg: dict) -> ExpectationMode:
    return ExpectationMode(cfg["inference"]["expectation"], cfg["inference"]["n_samples"])


def estep_config(cfg: dict) -> GradientEStepConfig:
    return GradientEStepConfig(expectation=expectation_mode(cfg), **cfg["inference"]["estep"])


# --- builders -------------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is not set")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {str(path)!r} does not exist")
    return p


def build_model(cfg: dict, dataset: SequenceDataset | None = None):
    mc = cfg["model"]
    if mc["kind"] == "lgssm":
        if mc["fixture"] is not None:
            model = lgssm_fixture(1 if mc["fixture"] == "scalar" else 4)
        else:
            model = LinearGaussianSSM(*(mc[k] for k in LGSSM_KEYS))
        if dataset is not None and dataset.obs_dim != model.obs_dim:
            raise ModelConfigError(f"data obs_dim {dataset.obs_dim} != model obs_dim {model.obs_dim}")
        return model
    obs_dim = mc["obs_dim"]
    if dataset is not None:
        if obs_dim is not None and obs_dim != dataset.obs_dim:
            raise ModelConfigError(f"model.obs_dim {obs_dim} != data obs_dim {dataset.obs_dim}")
        obs_dim = dataset.obs_dim
    if obs_dim is None:
        obs_dim = cfg["data"]["generator"]["obs_dim"]
    family = mc["output_family"]
    if dataset is not None and dataset.kind == "binary" and family != "bernoulli":
        raise ModelConfigError("binary data needs model.output_family bernoulli")
    bin_width = mc["bin_width"]
    if family == "discretized_gaussian" and bin_width is None:
        if dataset is None:
            raise ConfigError("model.bin_width must be set when no data is available")
        from .data import default_bin_width
        bin_width = default_bin_width(dataset)
    return DeepSequenceModel(obs_dim, mc["latent_dim"], mc["hidden_dim"], mc["width"], family,
                             bin_width, seed=cfg["seed"])


def build_network(cfg: dict, model) -> IterativeInferenceModel:
    ic = cfg["inference"]
    return IterativeInferenceModel(model.latent_dim, model.obs_dim, ic["width"], ic["encode_data"],
                                   ic["normalize_mean"], ic["normalize_inputs"], seed=cfg["seed"] + 1)


def build_strategy(cfg: dict, network):
    if cfg["inference"]["strategy"] == "avf":
        return AmortizedInference(network, cfg["inference"]["K"], expectation_mode(cfg))
    return GradientInference(estep_config(cfg))


def load_run_checkpoint(cfg: dict, path, dataset=None):
    """Build model and network from the config and load ``path`` into them."""
    _require_file(path, "checkpoint")
    try:
        doc = read_checkpoint(path)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ModelConfigError(f"{path}: unreadable checkpoint ({err})") from None
    model = build_model(cfg, dataset)
    load_tensors(model.params, doc["model"]["tensors"], "model")
    network = None
    if cfg["inference"]["strategy"] == "avf":
        if not doc.get("inference_model"):
            raise ModelConfigError(f"{path}: no inference network stored, but inference.strategy is avf")
        network = build_network(cfg, model)
        load_tensors(network.params, doc["inference_model"]["tensors"], "inference_model")
    return model, network


# --- output helpers ---------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True)


def _prepare(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _emit_report(cfg: dict, report: dict) -> None:
    text = json.dumps(_jsonable(report), sort_keys=True, indent=2)
    print(text)
    if cfg["output"]["report"]:
        _prepare(cfg["output"]["report"]).write_text(text + "\n")


def _eval_record(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if k != "free_energy_per_sequence"}


# --- commands ---------------------------------------------------------------------

def cmd_generate(cfg: dict, args) -> int:
    g, seed = cfg["data"]["generator"], cfg["seed"]

    def make(n, s):
        if g["kind"] == "oscillator":
            return generate_oscillator_data(n, g["T"], g["obs_dim"], g["process_noise"], g["obs_noise"],
                                            s, g["amplitude"])
        if g["kind"] == "binary":
            return generate_binary_sequences(n, g["T"], g["obs_dim"], g["flip_prob"], s)
        if cfg["model"]["kind"] != "lgssm":
            raise ConfigError("data.generator.kind lgssm samples from the model section; set model.kind lgssm")
        return generate_lgssm_data(build_model(cfg), n, g["T"], s)

    if cfg["data"]["train"] is None:
        raise ConfigError("data.train is not set")
    written = {}
    save_dataset(make(g["n_train"], seed), _prepare(cfg["data"]["train"]))
    written["train"] = cfg["data"]["train"]
    if cfg["data"]["validation"] is not None:
        save_dataset(make(g["n_validation"], seed + 1), _prepare(cfg["data"]["validation"]))
        written["validation"] = cfg["data"]["validation"]
    print(_dumps({"written": written}))
    return 0


def _datasets(cfg: dict):
    train = load_dataset(_require_file(cfg["data"]["train"], "data.train"))
    val = None
    if cfg["data"]["validation"] is not None:
        val = load_dataset(_require_file(cfg["data"]["validation"], "data.validation"))
    return train, val


def run_training(cfg: dict, threads: int = 1) -> tuple[list[dict], object, object]:
    """Train per the config; returns ``(metric records, model, network)``."""
    train, val = _datasets(cfg)
    tc = training_config(cfg)
    model = build_model(cfg, train)
    network = build_network(cfg, model) if cfg["inference"]["strategy"] == "avf" else None
    strategy = build_strategy(cfg, network)
    rng = np.random.default_rng(cfg["seed"])
    optimizer = None
    if tc.epochs > 0:
        optimizer = make_optimizer(tc, trainable_parameters(model, strategy, tc.update_model))
    records = []
    for epoch in range(tc.epochs):
        records.append(train_epoch(model, strategy, train, tc, epoch, rng, optimizer, threads))
        if val is not None:
            ev = evaluate(model, strategy, val, np.random.default_rng([cfg["seed"], epoch]),
                          tc.batch_size, tc.shard_size, threads)
            records.append({"epoch": epoch, "split": "validation", **_eval_record(ev)})
    return records, model, network


def cmd_train(cfg: dict, args) -> int:
    records, model, network = run_training(cfg, args.threads)
    metrics = _prepare(cfg["output"]["metrics"])
    metrics.write_text("".join(_dumps(r) + "\n" for r in records))
    save_checkpoint(_prepare(cfg["output"]["checkpoint"]), model, network,
                    extra={"config": cfg, "epochs_completed": cfg["training"]["epochs"]})
    final = records[-1] if records else {}
    print(_dumps({"checkpoint": cfg["output"]["checkpoint"], "metrics": cfg["output"]["metrics"],
                  "final": final}))
    return 0


def cmd_eval(cfg: dict, args) -> int:
    split = args.split
    path = cfg["data"][split]
    ds = load_dataset(_require_file(path, f"data.{split}"))
    model, network = load_run_checkpoint(cfg, args.checkpoint, ds)
    tc = training_config(cfg)
    ev = evaluate(model, build_strategy(cfg, network), ds, np.random.default_rng([cfg["seed"], 7]),
                  tc.batch_size, tc.shard_size, args.threads)
    _emit_report(cfg, {"split": split, **_eval_record(ev)})
    return 0


def cmd_filter(cfg: dict, args) -> int:
    ds = load_dataset(_require_file(args.sequences, "sequence file"))
    model, network = load_run_checkpoint(cfg, args.checkpoint, ds)
    strategy = build_strategy(cfg, network)
    out = _prepare(args.out or cfg["output"]["filter"])
    lines = []
    for i, seq in enumerate(ds.sequences):
        tr = filter_sequence(model, strategy, seq, np.random.default_rng([cfg["seed"], i]))
        for t, (sfe, (mean, log_var)) in enumerate(zip(tr.per_step, tr.posterior_params)):
            v = sfe.values()
            rec = {"sequence": i, "t": t + 1, "free_energy": float(v["total"]),
                   "reconstruction": float(v["reconstruction"]), "kl": float(v["kl"]),
                   "mean": mean, "log_var": log_var}
            if tr.inference_traces:
                rec["iteration_free_energy"] = tr.inference_traces[t]
            lines.append(_dumps(rec))
    out.write_text("".join(line + "\n" for line in lines))
    print(_dumps({"filter": str(out), "sequences": len(ds), "steps": len(lines)}))
    return 0


def cmd_gradcheck(cfg: dict, args) -> int:
    gc = cfg["gradcheck"]
    model = build_model(cfg)
    network = None
    if cfg["inference"]["strategy"] == "avf":
        network = build_network(cfg, model)
    errors = gradient_suite(model, cfg["seed"], gc["T"], gc["eps"], gc["max_coords"], network)
    checks = {k: {"max_rel_error": v, "pass": bool(v < gc["tol"])} for k, v in errors.items()}
    ok = all(c["pass"] for c in checks.values())
    _emit_report(cfg, {"tolerance": gc["tol"], "eps": gc["eps"], "checks": checks, "pass": ok})
    if not ok:
        raise CheckFailed("gradient check above tolerance: "
                          + ", ".join(k for k, c in checks.items() if not c["pass"]))
    return 0


def cmd_verify_kalman(cfg: dict, args) -> int:
    if cfg["model"]["kind"] != "lgssm":
        raise ConfigError("verify-kalman needs model.kind lgssm")
    vc = cfg["verify"]
    model = build_model(cfg)
    if args.sequences:
        ds = load_dataset(_require_file(args.sequences, "sequence file"))
        if ds.obs_dim != model.obs_dim:
            raise ModelConfigError(f"data obs_dim {ds.obs_dim} != model obs_dim {model.obs_dim}")
        xs = ds.sequences[0]
    else:
        xs, _ = model.sample_sequence(vc["T"], np.random.default_rng(cfg["seed"]))
    r = kalman_equivalence(model, xs, vc["iterations"], vc["step_size"])
    steps = [{"t": t + 1, "mean_error": r["mean_error"][t], "free_energy": r["free_energy"][t],
              "nll": r["step_nll"][t], "free_energy_gap": abs(r["free_energy_gap"][t])}
             for t in range(r["T"])]
    max_mean = float(np.max(r["mean_error"]))
    max_gap = float(np.max(np.abs(r["free_energy_gap"])))
    ok = max_mean < vc["mean_tol"] and max_gap < vc["free_energy_tol"]
    _emit_report(cfg, {"T": r["T"], "iterations": vc["iterations"], "max_mean_error": max_mean,
                       "max_free_energy_gap": max_gap, "mean_tol": vc["mean_tol"],
                       "free_energy_tol": vc["free_energy_tol"], "pass": ok, "steps": steps})
    if not ok:
        raise CheckFailed(f"Kalman equivalence outside tolerance: max mean error {max_mean:.3g}, "
                          f"max free-energy gap {max_gap:.3g}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "filter": cmd_filter,
            "gradcheck": cmd_gradcheck, "verify-kalman": cmd_verify_kalman}


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varfilter", description="Variational filtering experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted path (repeatable)")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or 1)")
        if name in ("eval", "filter"):
            p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--split", choices=("train", "validation"), default="validation")
        if name == "filter":
            p.add_argument("--sequences", required=True, help="dataset file to filter")
            p.add_argument("--out", help="output JSONL (default: output.filter)")
        if name == "verify-kalman":
            p.add_argument("--sequences", help="filter the first sequence of this file instead of sampling")
    return parser


_EXIT = [(CheckFailed, 1), (ConfigError, 2), (ModelConfigError, 3), (DatasetFormatError, 3),
         (FileNotFoundError, 3), (NonFiniteFreeEnergy, 4), (InferenceDivergence, 4),
         (SingularInnovation, 4), (DomainError, 4), (ShapeError, 4), (FloatingPointError, 4)]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is None:
            args.threads = _default_threads()
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, args.set)
        if args.command == "eval" and cfg["data"][args.split] is None:
            raise ConfigError(f"data.{args.split} is not set")
        return COMMANDS[args.command](cfg, args)
    except tuple(cls for cls, _ in _EXIT) as err:
        code = next(c for cls, c in _EXIT if isinstance(err, cls))
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
