"""Seeded synthetic sequence datasets and their JSON-lines file format.

File layout: a header object, then one object per sequence::

    {"format": "varfilter-dataset/1", "kind": "real", "obs_dim": 2, "n_sequences": 2, "metadata": {...}}
    {"obs": [[0.1, -0.3], [0.2, 0.5]]}
    {"obs": [[1.5, 0.0]]}

Real values are written with 17 significant digits; binary values as 0/1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import LinearGaussianSSM

DATASET_FORMAT = "varfilter-dataset/1"


class DatasetFormatError(ValueError):
    pass


@dataclass
class SequenceDataset:
    sequences: list[np.ndarray]
    kind: str = "real"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("real", "binary"):
            raise ValueError(f"kind must be 'real' or 'binary', got {self.kind!r}")
        self.sequences = [np.asarray(s, dtype=np.float64).reshape(len(s), -1) for s in self.sequences]
        dims = {s.shape[1] for s in self.sequences}
        if len(dims) > 1:
            raise ValueError(f"sequences disagree on obs_dim: {sorted(dims)}")
        if any(len(s) < 1 for s in self.sequences):
            raise ValueError("every sequence needs at least one step")
        if self.kind == "binary" and any(np.any((s != 0) & (s != 1)) for s in self.sequences):
            raise ValueError("binary dataset contains values other than 0/1")

    @property
    def obs_dim(self) -> int:
        return self.sequences[0].shape[1]

    def __len__(self):
        return len(self.sequences)

    def split(self, n_first: int) -> tuple[SequenceDataset, SequenceDataset]:
        return (SequenceDataset(self.sequences[:n_first], self.kind, dict(self.metadata)),
                SequenceDataset(self.sequences[n_first:], self.kind, dict(self.metadata)))

    def value_range(self) -> float:
        stacked = np.concatenate(self.sequences)
        return float(stacked.max() - stacked.min())


def default_bin_width(ds: SequenceDataset, bins: int = 256) -> float:
    """Discretization width for real data: value range over ``bins``."""
    width = ds.value_range() / bins
    return width if width > 0 else 1.0 / bins


def generate_lgssm_data(model: LinearGaussianSSM, n_sequences: int, T: int, seed: int) -> SequenceDataset:
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    A, C, b = model.A, model.C, model.b
    q_sd, r_sd = np.sqrt(model.Q_diag), np.sqrt(model.R_diag)
    z = model.init_mean + np.sqrt(model.init_var_diag) * rng.standard_normal((n_sequences, model.latent_dim))
    xs = np.empty((T, n_sequences, model.obs_dim))
    for t in range(T):
        if t > 0:
            z = z @ A.T + q_sd * rng.standard_normal(z.shape)
        xs[t] = z @ C.T + b + r_sd * rng.standard_normal((n_sequences, model.obs_dim))
    meta = {"generator": "lgssm", "seed": seed, "T": T, "n_sequences": n_sequences,
            "model": {"A": A.tolist(), "Q_diag": model.Q_diag.tolist(), "C": C.tolist(),
                      "b": b.tolist(), "R_diag": model.R_diag.tolist(),
                      "init_mean": model.init_mean.tolist(), "init_var_diag": model.init_var_diag.tolist()}}
    return SequenceDataset([xs[:, i] for i in range(n_sequences)], "real", meta)


def generate_oscillator_data(n_sequences: int, T: int, obs_dim: int, process_noise: float,
                             obs_noise: float, seed: int, amplitude: float = 1.0) -> SequenceDataset:
    """Noisy multi-channel sinusoids driven by a random-walk phase and frequency.

    Channel ``d`` observes ``amplitude * sin(phase + 2 pi d / obs_dim)``.
    """
    if process_noise < 0 or obs_noise < 0:
        raise ValueError("noise levels must be non-negative")
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * np.pi, n_sequences)
    freq = rng.uniform(0.2, 0.6, n_sequences)
    offsets = 2 * np.pi * np.arange(obs_dim) / obs_dim
    xs = np.empty((T, n_sequences, obs_dim))
    for t in range(T):
        xs[t] = amplitude * np.sin(phase[:, None] + offsets) \
            + obs_noise * rng.standard_normal((n_sequences, obs_dim))
        freq = freq + process_noise * rng.standard_normal(n_sequences)
        phase = phase + freq + process_noise * rng.standard_normal(n_sequences)
    meta = {"generator": "oscillator", "seed": seed, "T": T, "n_sequences": n_sequences,
            "obs_dim": obs_dim, "process_noise": process_noise, "obs_noise": obs_noise,
            "amplitude": amplitude}
    return SequenceDataset([xs[:, i] for i in range(n_sequences)], "real", meta)


def generate_binary_sequences(n_sequences: int, T: int, obs_dim: int, transition_flip_prob: float,
                              seed: int) -> SequenceDataset:
    """Each channel is a two-state Markov chain flipping with the given probability."""
    if not 0.0 <= transition_flip_prob <= 1.0:
        raise ValueError("transition_flip_prob must lie in [0, 1]")
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    state = rng.random((n_sequences, obs_dim)) < 0.5
    xs = np.empty((T, n_sequences, obs_dim))
    for t in range(T):
        if t > 0:
            state = state ^ (rng.random(state.shape) < transition_flip_prob)
        xs[t] = state
    meta = {"generator": "binary_markov", "seed": seed, "T": T, "n_sequences": n_sequences,
            "obs_dim": obs_dim, "transition_flip_prob": transition_flip_prob}
    return SequenceDataset([xs[:, i] for i in range(n_sequences)], "binary", meta)


def _fmt(v: float, binary: bool) -> str:
    return str(int(v)) if binary else format(v, ".17g")


def save_dataset(ds: SequenceDataset, path) -> None:
    binary = ds.kind == "binary"
    header = {"format": DATASET_FORMAT, "kind": ds.kind, "obs_dim": ds.obs_dim,
              "n_sequences": len(ds), "metadata": ds.metadata}
    lines = [json.dumps(header, sort_keys=True)]
    for seq in ds.sequences:
        rows = ",".join("[" + ",".join(_fmt(v, binary) for v in row) + "]" for row in seq)
        lines.append('{"obs":[' + rows + "]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> SequenceDataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"{path}:1: malformed header: {err.msg}") from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{path}:1: header is not a {DATASET_FORMAT} object")
    for key in ("kind", "obs_dim", "n_sequences"):
        if key not in header:
            raise DatasetFormatError(f"{path}:1: header missing {key!r}")
    seqs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            obs = np.array(rec["obs"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise DatasetFormatError(f"{path}:{lineno}: malformed sequence record ({err})") from None
        if obs.ndim != 2 or obs.shape[1] != header["obs_dim"] or len(obs) < 1:
            raise DatasetFormatError(f"{path}:{lineno}: expected a non-empty [T x {header['obs_dim']}] "
                                     f"array, got shape {obs.shape}")
        seqs.append(obs)
    if len(seqs) != header["n_sequences"]:
        raise DatasetFormatError(f"{path}: header announces {header['n_sequences']} sequences, "
                                 f"found {len(seqs)}")
    if not seqs:
        raise DatasetFormatError(f"{path}: no sequences")
    try:
        return SequenceDataset(seqs, header["kind"], header.get("metadata", {}))
    except ValueError as err:
        raise DatasetFormatError(f"{path}: {err}") from None
