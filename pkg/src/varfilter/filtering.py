"""Variational filtering EM: sequential E-steps, free-energy accumulation and
mini-batch M-steps.

Sequences in a batch are stacked along axis 1 (``xs`` has shape
``(T, B, obs_dim)``); shorter sequences are padded and masked.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import core
from .core import Node
from .distributions import DiagonalGaussian, gaussian_log_prob, reparameterized_sample
from .inference import (MONTE_CARLO, ApproxPosterior, ExpectationMode, GradientEStepConfig,
                        IterativeInferenceModel, StepFreeEnergy, gradient_estep, run_avf,
                        step_free_energy)
from .models import DynamicalModel, LinearGaussianSSM


class NonFiniteFreeEnergy(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite free energy at step {step}")


# --- inference strategies -------------------------------------------------------

@dataclass
class GradientInference:
    """Direct optimization of each step free energy."""
    config: GradientEStepConfig

    @property
    def expectation(self) -> ExpectationMode:
        return self.config.expectation


@dataclass
class AmortizedInference:
    """Amortized variational filtering with ``K`` refinement iterations per step."""
    network: IterativeInferenceModel
    K: int = 1
    expectation: ExpectationMode = MONTE_CARLO

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")


@dataclass
class FixedPosteriors:
    """Use given posterior parameters per step; ``posteriors[t]`` may also be a
    callable ``(t, prior) -> DiagonalGaussian``."""
    posteriors: Sequence | Callable
    expectation: ExpectationMode = MONTE_CARLO

    def at(self, t: int, prior: DiagonalGaussian) -> DiagonalGaussian:
        if callable(self.posteriors):
            return self.posteriors(t, prior)
        return self.posteriors[t]


# --- filtering ------------------------------------------------------------------

@dataclass
class FilterTrace:
    """Per-step free energies of one filtering pass.

    ``weights[t]`` masks padded steps; ``loss`` is the differentiable training
    objective (``None`` when built without gradients).
    """
    per_step: list[StepFreeEnergy]
    latent_samples: list[np.ndarray]
    posterior_params: list[tuple[np.ndarray, np.ndarray]]
    weights: list[np.ndarray] = field(default_factory=list)
    inference_traces: list[np.ndarray] = field(default_factory=list)
    loss: Node | None = None

    def _masked(self, key: str) -> np.ndarray:
        out = 0.0
        for sfe, w in zip(self.per_step, self.weights):
            out = out + w * sfe.values()[key]
        return out

    @property
    def total(self):
        """Sum of per-step totals (per sequence when batched)."""
        return self._masked("total")

    @property
    def reconstruction(self):
        return self._masked("reconstruction")

    @property
    def kl(self):
        return self._masked("kl")

    @property
    def lengths(self) -> np.ndarray:
        return np.sum(self.weights, axis=0)


def _as_batch(xs):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    return xs


def filter_sequence(model: DynamicalModel, strategy, xs, rng: np.random.Generator,
                    kl_weight: float = 1.0, lengths=None, loss_scale=None,
                    build_loss: bool = False) -> FilterTrace:
    """Run the variational filter over ``xs`` (``(T, obs_dim)`` or ``(T, B, obs_dim)``).

    At each step: prior from the state, E-step on the step free energy, then
    the state advances on a sample from the final posterior (or on its moments
    under analytic expectations). Past samples never change.

    With ``build_loss`` the trace carries ``loss``: the KL-weighted free
    energies times ``loss_scale`` (per sequence), plus every intermediate AVF
    free energy, ready for :func:`~varfilter.core.backward`.
    """
    xs = _as_batch(xs)
    T = xs.shape[0]
    if T < 1:
        raise ValueError("need at least one time step")
    if xs.shape[-1] != model.obs_dim:
        raise ValueError(f"observation dim {xs.shape[-1]} != model obs_dim {model.obs_dim}")
    batch_shape = xs.shape[1:-1]
    if lengths is None:
        lengths = np.full(batch_shape, T)
    lengths = np.asarray(lengths)
    scale = np.ones(batch_shape) if loss_scale is None else np.asarray(loss_scale, dtype=np.float64)
    mode = strategy.expectation
    live = model if build_loss else model.frozen()
    frozen = live if not build_loss else model.frozen()
    network = None
    if isinstance(strategy, AmortizedInference):
        network = strategy.network if build_loss else strategy.network.frozen()

    state = live.init_state(batch_shape)
    trace = FilterTrace([], [], [])
    loss_terms = []
    for t in range(T):
        x = xs[t]
        w = (lengths > t).astype(np.float64)
        prior = live.prior(state)
        extra = []
        if network is not None:
            q, steps, samples = run_avf(network, live, state, x, strategy.K, rng, mode, prior,
                                        kl_weight, frozen)
            final = steps[-1]
            extra = steps[1:-1]
            trace.inference_traces.append(np.stack([s.total.value for s in steps]))
        else:
            if isinstance(strategy, GradientInference):
                q = gradient_estep(live, state, x, strategy.config, rng, prior=prior, kl_weight=kl_weight)
            elif isinstance(strategy, FixedPosteriors):
                q = ApproxPosterior(strategy.at(t, prior.detach()))
            else:
                raise TypeError(f"unknown inference strategy {type(strategy).__name__}")
            final, samples = step_free_energy(live, state, x, q, mode, rng, prior, kl_weight)
        if not np.all(np.isfinite(final.total.value)):
            raise NonFiniteFreeEnergy(t + 1)
        trace.per_step.append(final)
        trace.weights.append(w)
        trace.posterior_params.append((q.lam.mean.value.copy(), q.lam.log_var.value.copy()))
        if build_loss:
            coef = w * scale
            step_obj = final.objective
            for s in extra:
                step_obj = step_obj + s.objective
            loss_terms.append(core.reduce_sum(step_obj * coef))
        if mode.kind == "analytic":
            z_in = q.lam.detach()
            trace.latent_samples.append(q.lam.mean.value.copy())
        else:
            z_in = core.stop_gradient(samples[0])
            trace.latent_samples.append(z_in.value.copy())
        state = live.update_state(state, x, z_in)
    if build_loss:
        loss = loss_terms[0]
        for term in loss_terms[1:]:
            loss = loss + term
        trace.loss = loss
    return trace


# --- schedules and optimizers -------------------------------------------------------

def kl_anneal_weight(epoch_index: int, kl_anneal_epochs: int) -> float:
    """Linear KL warm-up: ``min(1, (epoch + 1) / anneal_epochs)``; 1 when disabled."""
    if epoch_index < 0 or kl_anneal_epochs < 0:
        raise ValueError("epoch_index and kl_anneal_epochs must be non-negative")
    if kl_anneal_epochs == 0:
        return 1.0
    return min(1.0, (epoch_index + 1) / kl_anneal_epochs)


def learning_rate(base: float, decay: float, epoch_index: int) -> float:
    return base * decay ** epoch_index


class Adam:
    def __init__(self, params: Sequence[Node], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mh = self.m[i] / (1 - b1 ** self.t)
            vh = self.v[i] / (1 - b2 ** self.t)
            p.value = p.value - lr * mh / (np.sqrt(vh) + self.eps)


class SGD:
    def __init__(self, params: Sequence[Node]):
        self.params = list(params)

    def step(self, grads, lr: float) -> None:
        for p, g in zip(self.params, grads):
            p.value = p.value - lr * g


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    lr_decay_per_epoch: float = 0.999
    kl_anneal_epochs: int = 0
    batch_size: int = 64
    shard_size: int = 16
    optimizer: str = "adaptive_moments"
    seed: int = 0
    update_model: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must lie in (0, 1]")
        if self.kl_anneal_epochs < 0 or self.epochs < 0:
            raise ValueError("epochs and kl_anneal_epochs must be non-negative")
        if self.batch_size < 1 or self.shard_size < 1:
            raise ValueError("batch_size and shard_size must be positive")
        if self.optimizer not in ("adaptive_moments", "plain_sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def trainable_parameters(model: DynamicalModel, strategy, update_model: bool = True) -> list[Node]:
    """Model parameters (unless ``update_model`` is off) followed by inference-network ones."""
    params = model.parameters() if update_model else []
    if isinstance(strategy, AmortizedInference):
        params += strategy.network.parameters()
    return params


def make_optimizer(cfg: TrainConfig, params):
    return Adam(params) if cfg.optimizer == "adaptive_moments" else SGD(params)


def pad_batch(sequences: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(T_i, d)`` arrays into ``(T_max, B, d)`` with zero padding."""
    lengths = np.array([len(s) for s in sequences])
    out = np.zeros((lengths.max(), len(sequences), sequences[0].shape[-1]))
    for i, s in enumerate(sequences):
        out[: len(s), i] = s
    return out, lengths


def _shards(indices: np.ndarray, size: int) -> list[np.ndarray]:
    return [indices[i:i + size] for i in range(0, len(indices), size)]


def _run_shards(jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def _per_step_summary(trace: FilterTrace) -> dict[str, np.ndarray]:
    T = trace.lengths
    return {"free_energy": trace.total / T, "recon": trace.reconstruction / T, "kl": trace.kl / T}


def train_epoch(model: DynamicalModel, strategy, dataset, cfg: TrainConfig, epoch_index: int,
                rng: np.random.Generator, optimizer=None, threads: int = 1) -> dict:
    """One pass over ``dataset`` (a list of ``(T_i, obs_dim)`` arrays or a
    :class:`~varfilter.data.SequenceDataset`); one parameter update per mini-batch.

    Each batch is split into fixed-size shards filtered independently (possibly
    on worker threads); shard gradients are reduced in shard order, so results
    do not depend on ``threads``.
    """
    sequences = list(getattr(dataset, "sequences", dataset))
    if not sequences:
        raise ValueError("dataset is empty")
    params = trainable_parameters(model, strategy, cfg.update_model)
    if not params:
        raise ValueError("nothing to train: the model is frozen and the strategy has no parameters")
    if optimizer is None:
        optimizer = make_optimizer(cfg, params)
    lr = learning_rate(cfg.learning_rate, cfg.lr_decay_per_epoch, epoch_index)
    klw = kl_anneal_weight(epoch_index, cfg.kl_anneal_epochs)
    order = rng.permutation(len(sequences))
    base_seed = int(rng.integers(2 ** 62))
    summaries = []
    for b, batch in enumerate(_shards(order, cfg.batch_size)):
        n_batch = len(batch)

        def job(shard, s, b=b, n_batch=n_batch):
            xs, lengths = pad_batch([sequences[i] for i in shard])
            shard_rng = np.random.default_rng([base_seed, b, s])
            tr = filter_sequence(model, strategy, xs, shard_rng, klw, lengths,
                                 loss_scale=1.0 / (lengths * n_batch), build_loss=True)
            grads = core.backward(tr.loss, accumulate=False)
            return [grads.get(p.id, 0.0) for p in params], _per_step_summary(tr)

        jobs = [lambda sh=sh, s=s: job(sh, s) for s, sh in enumerate(_shards(batch, cfg.shard_size))]
        results = _run_shards(jobs, threads)
        total = [np.zeros_like(p.value) for p in params]
        for grads, summary in results:
            for i, g in enumerate(grads):
                total[i] = total[i] + g
            summaries.append(summary)
        optimizer.step(total, lr)
    merged = {k: np.concatenate([s[k] for s in summaries]) for k in summaries[0]}
    return {"epoch": epoch_index, "split": "train",
            "mean_free_energy_per_step": float(np.mean(merged["free_energy"])),
            "mean_recon": float(np.mean(merged["recon"])), "mean_kl": float(np.mean(merged["kl"])),
            "kl_weight": klw, "lr": lr}


def evaluate(model: DynamicalModel, strategy, dataset, rng: np.random.Generator,
             batch_size: int = 64, shard_size: int = 16, threads: int = 1) -> dict:
    """Unweighted free energy per step on ``dataset``, without parameter updates.

    For amortized inference ``iteration_free_energy`` holds the mean per-step
    free energy after each of the ``K + 1`` inference iterations (index 0 is
    the prior initialization).
    """
    sequences = list(getattr(dataset, "sequences", dataset))
    if not sequences:
        raise ValueError("dataset is empty")
    base_seed = int(rng.integers(2 ** 62))
    idx = np.arange(len(sequences))
    jobs = []
    for b, batch in enumerate(_shards(idx, batch_size)):
        for s, shard in enumerate(_shards(batch, shard_size)):
            def job(shard=shard, b=b, s=s):
                xs, lengths = pad_batch([sequences[i] for i in shard])
                tr = filter_sequence(model, strategy, xs, np.random.default_rng([base_seed, b, s]),
                                     lengths=lengths)
                out = _per_step_summary(tr)
                if tr.inference_traces:
                    w = np.stack(tr.weights)
                    it = np.stack(tr.inference_traces)  # (T, K+1, B)
                    out["iterations"] = (it * w[:, None, :]).sum(axis=0) / tr.lengths
                return out
            jobs.append(job)
    results = _run_shards(jobs, threads)
    merged = {k: np.concatenate([r[k] for r in results], axis=-1) for k in results[0]}
    out = {"mean_free_energy_per_step": float(np.mean(merged["free_energy"])),
           "mean_recon": float(np.mean(merged["recon"])), "mean_kl": float(np.mean(merged["kl"])),
           "free_energy_per_sequence": merged["free_energy"]}
    if "iterations" in merged:
        out["iteration_free_energy"] = merged["iterations"].mean(axis=-1)
    return out


# --- free-energy decomposition check ----------------------------------------------

def verify_decomposition(model: DynamicalModel, xs, rng: np.random.Generator,
                         posterior_fn: Callable | None = None) -> float:
    """Relative gap between the whole-sequence free-energy estimator and the
    sum of per-step terms, on one shared latent trajectory.

    ``posterior_fn(t, prior)`` picks ``q(z_t)``; the default is the prior.
    The whole-sequence joint density uses the dense Gaussian for linear
    Gaussian models and a single stacked density evaluation otherwise.
    """
    xs = _as_batch(xs)
    if xs.ndim != 2:
        raise ValueError("verify_decomposition takes one sequence of shape (T, obs_dim)")
    frozen = model.frozen()
    state = frozen.init_state()
    per_step, zs, q_means, q_lvs = 0.0, [], [], []
    for t, x in enumerate(xs):
        prior = frozen.prior(state)
        q = posterior_fn(t, prior) if posterior_fn is not None else prior
        z = reparameterized_sample(q, rng.standard_normal(q.mean.shape))
        log_joint = frozen.decode(state, z).log_prob(x).item() + gaussian_log_prob(z, prior).item()
        per_step += -(log_joint - gaussian_log_prob(z, q).item())
        zs.append(z.value)
        q_means.append(q.mean.value)
        q_lvs.append(q.log_var.value)
        state = frozen.update_state(state, x, z)
    zs = np.stack(zs)
    if isinstance(model, LinearGaussianSSM):
        from .kalman import joint_state_obs_logpdf
        log_p = joint_state_obs_logpdf(model, xs, zs)
    else:
        log_p = frozen.joint_log_prob(xs, zs).item()
    q_all = DiagonalGaussian(np.concatenate(q_means), np.concatenate(q_lvs))
    whole = -(log_p - gaussian_log_prob(zs.reshape(-1), q_all).item())
    return abs(whole - per_step) / max(abs(whole), abs(per_step), 1e-300)
