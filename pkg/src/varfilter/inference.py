"""Per-step inference: step free energy, gradient E-steps and the amortized
iterative inference model.

Gradients with respect to the posterior parameters are always computed on a
detached copy of the model and state, so they enter the inference network as
constants.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import core
from .core import Node, ShapeError
from .distributions import DiagonalGaussian, gaussian_kl, reparameterized_sample
from .models import DynamicalModel, ModelState

LOGVAR_CLAMP = 10.0


class InferenceDivergence(RuntimeError):
    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        super().__init__(f"inference diverged at iteration {iteration}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class ExpectationMode:
    """``monte_carlo`` with ``n_samples`` reparameterized draws, or ``analytic``."""
    kind: str = "monte_carlo"
    n_samples: int = 1

    def __post_init__(self):
        if self.kind not in ("monte_carlo", "analytic"):
            raise ValueError(f"expectation mode must be monte_carlo or analytic, got {self.kind!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


MONTE_CARLO = ExpectationMode()
ANALYTIC = ExpectationMode("analytic")


@dataclass
class ApproxPosterior:
    lam: DiagonalGaussian
    updates: int = 0

    @property
    def origin(self) -> str:
        return "prior_init" if self.updates == 0 else f"updated({self.updates})"

    @property
    def mean(self) -> np.ndarray:
        return self.lam.mean.value

    @property
    def var(self) -> np.ndarray:
        return self.lam.var


@dataclass
class StepFreeEnergy:
    """Per-example reconstruction, KL and their unweighted sum (nats)."""
    reconstruction: Node
    kl: Node
    kl_weight: float = 1.0

    @property
    def total(self) -> Node:
        return self.reconstruction + self.kl

    @property
    def objective(self) -> Node:
        """The annealed training objective ``recon + kl_weight * kl``."""
        if self.kl_weight == 1.0:
            return self.total
        return self.reconstruction + self.kl * self.kl_weight

    def values(self) -> dict:
        r, k = self.reconstruction.value, self.kl.value
        return {"reconstruction": r, "kl": k, "total": r + k}


def init_at_prior(prior: DiagonalGaussian) -> ApproxPosterior:
    """Copy the prior parameters into fresh, gradient-free posterior parameters."""
    return ApproxPosterior(DiagonalGaussian(core.constant(prior.mean.value.copy()),
                                            core.constant(prior.log_var.value.copy())))


def step_free_energy(model: DynamicalModel, state: ModelState, x_t, q: ApproxPosterior,
                     mode: ExpectationMode = MONTE_CARLO, rng: np.random.Generator | None = None,
                     prior: DiagonalGaussian | None = None, kl_weight: float = 1.0,
                     noise: list[np.ndarray] | None = None):
    """Reconstruction + KL to the step prior; returns ``(StepFreeEnergy, samples)``.

    ``noise`` fixes the standard-normal draws (common random numbers).
    """
    if prior is None:
        prior = model.prior(state)
    lam = q.lam
    if mode.kind == "analytic":
        if not model.supports_analytic:
            raise ValueError(f"analytic expectations need a linear Gaussian decoder; "
                             f"model kind is {model.kind!r}")
        recon = -model.expected_loglik(state, x_t, lam)
        samples = []
    else:
        if noise is None:
            if rng is None:
                raise ValueError("monte_carlo mode needs an rng or explicit noise")
            noise = [rng.standard_normal(lam.mean.shape) for _ in range(mode.n_samples)]
        samples, terms = [], []
        for eps in noise:
            z = reparameterized_sample(lam, eps)
            samples.append(z)
            terms.append(-model.decode(state, z).log_prob(x_t))
        recon = terms[0]
        for t in terms[1:]:
            recon = recon + t
        if len(terms) > 1:
            recon = recon * (1.0 / len(terms))
    kl = gaussian_kl(lam, prior)
    return StepFreeEnergy(recon, kl, kl_weight), samples


def posterior_gradient(frozen_model: DynamicalModel, frozen_state: ModelState, x_t,
                       mean: np.ndarray, log_var: np.ndarray, prior: DiagonalGaussian,
                       mode: ExpectationMode, rng=None, kl_weight: float = 1.0, noise=None):
    """``(F values, dF/dmean, dF/dlog_var)`` per example at the given parameters.

    ``frozen_model``, ``frozen_state`` and ``prior`` must carry no gradient path
    into trainable parameters.
    """
    mu = Node(mean, requires_grad=True)
    lv = Node(log_var, requires_grad=True)
    sfe, _ = step_free_energy(frozen_model, frozen_state, x_t, ApproxPosterior(DiagonalGaussian(mu, lv)),
                              mode, rng, prior, kl_weight, noise)
    obj = sfe.objective
    core.backward(core.reduce_sum(obj))
    return sfe, mu.grad, lv.grad


# --- direct gradient-based E-step -------------------------------------------

@dataclass
class GradientEStepConfig:
    iterations: int = 100
    step_size: float = 0.05
    optimizer: str = "adaptive_moments"
    expectation: ExpectationMode = MONTE_CARLO
    line_search: bool = False
    common_random_numbers: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.optimizer not in ("plain_sgd", "adaptive_moments"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.line_search and self.optimizer != "plain_sgd":
            raise ValueError("line_search is only available with plain_sgd")


def gradient_estep(model: DynamicalModel, state: ModelState, x_t, cfg: GradientEStepConfig,
                   rng: np.random.Generator | None = None, init: ApproxPosterior | None = None,
                   prior: DiagonalGaussian | None = None, kl_weight: float = 1.0,
                   trace: list | None = None) -> ApproxPosterior:
    """Optimize the posterior parameters of one step by gradient descent.

    Starts from the prior unless ``init`` is given. When ``trace`` is a list,
    the free energy (summed over the batch) before every step and at the end
    is appended to it.
    """
    frozen, fstate = model.frozen(), state.detach()
    prior = (prior if prior is not None else frozen.prior(fstate)).detach()
    q0 = init if init is not None else init_at_prior(prior)
    mean, log_var = q0.lam.mean.value.copy(), q0.lam.log_var.value.copy()
    mode = cfg.expectation
    fixed = None
    if mode.kind == "monte_carlo" and cfg.common_random_numbers:
        fixed = [rng.standard_normal(mean.shape) for _ in range(mode.n_samples)]

    def evaluate(m, lv):
        return posterior_gradient(frozen, fstate, x_t, m, lv, prior, mode, rng, kl_weight, fixed)

    m1 = [np.zeros_like(mean), np.zeros_like(log_var)]
    m2 = [np.zeros_like(mean), np.zeros_like(log_var)]
    step = cfg.step_size
    for it in range(1, cfg.iterations + 1):
        sfe, g_mu, g_lv = evaluate(mean, log_var)
        f_now = float(np.sum(sfe.objective.value))
        if trace is not None:
            trace.append(f_now)
        if cfg.optimizer == "adaptive_moments":
            upd = []
            for i, g in enumerate((g_mu, g_lv)):
                m1[i] = cfg.beta1 * m1[i] + (1 - cfg.beta1) * g
                m2[i] = cfg.beta2 * m2[i] + (1 - cfg.beta2) * g * g
                mh = m1[i] / (1 - cfg.beta1 ** it)
                vh = m2[i] / (1 - cfg.beta2 ** it)
                upd.append(step * mh / (np.sqrt(vh) + cfg.epsilon))
            mean, log_var = mean - upd[0], log_var - upd[1]
        elif cfg.line_search:
            mean, log_var, step = _armijo(evaluate, mean, log_var, g_mu, g_lv, f_now, step)
        else:
            mean, log_var = mean - step * g_mu, log_var - step * g_lv
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))) \
                or np.any(np.abs(log_var) > 700):
            raise InferenceDivergence(it, "non-finite posterior parameters")
    if trace is not None:
        trace.append(float(np.sum(evaluate(mean, log_var)[0].objective.value)))
    return ApproxPosterior(DiagonalGaussian(mean, log_var), q0.updates + cfg.iterations)


def _armijo(evaluate, mean, log_var, g_mu, g_lv, f_now, step, c=1e-4, max_halvings=40):
    """Backtracking step; returns the original point if no decrease is found."""
    sq = float(np.sum(g_mu ** 2) + np.sum(g_lv ** 2))
    s = step
    for _ in range(max_halvings):
        m, lv = mean - s * g_mu, log_var - s * g_lv
        if np.all(np.abs(lv) < 700):
            f_new = float(np.sum(evaluate(m, lv)[0].objective.value))
            if f_new <= f_now - c * s * sq:
                return m, lv, min(2 * s, step * 2 ** 10)
        s *= 0.5
    return mean, log_var, s


# --- amortized iterative inference model ---------------------------------------

class IterativeInferenceModel:
    """Gated update network refining posterior parameters from their gradients.

    Input is the concatenation of the separately layer-normalized terms
    ``[mean, log_var, d_mean, d_log_var]`` (plus ``x_t`` when ``encode_data``),
    passed through two highway layers with ELU activations. Two heads per
    parameter block emit a proposal and a gate ``g``; the new value is
    ``g * old + (1 - g) * proposal``.
    """

    def __init__(self, latent_dim: int, obs_dim: int = 0, width: int = 128,
                 encode_data: bool = False, normalize_mean: bool = True,
                 normalize_inputs: bool = True, seed: int = 0):
        if encode_data and obs_dim < 1:
            raise ValueError("encode_data needs obs_dim >= 1")
        self.latent_dim, self.obs_dim, self.width = latent_dim, obs_dim, width
        self.encode_data, self.normalize_mean = encode_data, normalize_mean
        self.normalize_inputs, self.seed = normalize_inputs, seed
        L, w = latent_dim, width
        n_in = self.input_width
        rng = np.random.default_rng(seed)

        def u(fan_in, shape):
            s = 1.0 / np.sqrt(fan_in)
            return core.parameter(rng.uniform(-s, s, size=shape))

        p = {}
        for layer, fan_in in (("hw1", n_in), ("hw2", w)):
            for part in ("h", "g"):
                p[f"{layer}.{part}.W"] = u(fan_in, (fan_in, w))
                p[f"{layer}.{part}.b"] = core.parameter(np.zeros(w))
        p["hw1.skip.W"] = u(n_in, (n_in, w))
        for head in ("mean.prop", "mean.gate", "log_var.prop", "log_var.gate"):
            p[head + ".W"] = u(w, (w, L))
            p[head + ".b"] = core.parameter(np.zeros(L))
        self.params = p

    @property
    def input_width(self) -> int:
        return 4 * self.latent_dim + (self.obs_dim if self.encode_data else 0)

    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def frozen(self) -> IterativeInferenceModel:
        view = copy.copy(self)
        view.params = {k: core.stop_gradient(v) for k, v in self.params.items()}
        return view

    def hyperparameters(self) -> dict:
        return {"latent_dim": self.latent_dim, "obs_dim": self.obs_dim, "width": self.width,
                "encode_data": self.encode_data, "normalize_mean": self.normalize_mean,
                "normalize_inputs": self.normalize_inputs, "seed": self.seed}

    def _highway(self, name: str, x: Node, skip: Node) -> Node:
        p = self.params
        h = core.elu(core.matmul(x, p[name + ".h.W"]) + p[name + ".h.b"])
        g = core.sigmoid(core.matmul(x, p[name + ".g.W"]) + p[name + ".g.b"])
        return skip + g * (h - skip)

    def __call__(self, mean: Node, log_var: Node, g_mean, g_log_var, x_t=None):
        L = self.latent_dim
        for t in (mean, log_var):
            if t.shape[-1:] != (L,):
                raise ShapeError("avf_update", [t.shape, (L,)])
        terms = [mean, log_var, core.constant(g_mean), core.constant(g_log_var)]
        for t in terms[2:]:
            if t.shape != mean.shape:
                raise ShapeError("avf_update", [mean.shape, t.shape], "gradient shape")
        if self.encode_data:
            if x_t is None:
                raise ValueError("encode_data is set but no observation was given")
            terms.append(core._as_node(x_t))
        if self.normalize_inputs:
            terms = [core.layer_normalize(t) for t in terms]
        x = core.concat(terms)
        p = self.params
        h = self._highway("hw1", x, core.matmul(x, p["hw1.skip.W"]))
        h = self._highway("hw2", h, h)

        def head(name):
            return core.matmul(h, p[name + ".W"]) + p[name + ".b"]

        prop_mean = head("mean.prop")
        if self.normalize_mean:
            prop_mean = core.layer_normalize(prop_mean)
        prop_lv = core.clamp(head("log_var.prop"), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        g_m = core.sigmoid(head("mean.gate"))
        g_v = core.sigmoid(head("log_var.gate"))
        new_mean = prop_mean + g_m * (mean - prop_mean)
        new_lv = prop_lv + g_v * (log_var - prop_lv)
        return new_mean, new_lv


def avf_update(f: IterativeInferenceModel, q: ApproxPosterior, grad, x_t=None) -> ApproxPosterior:
    """One amortized refinement step; ``grad`` is ``(d_mean, d_log_var)``."""
    g_mean, g_lv = (np.asarray(g.value if isinstance(g, Node) else g, dtype=np.float64) for g in grad)
    mean, lv = f(q.lam.mean, q.lam.log_var, g_mean, g_lv, x_t)
    return ApproxPosterior(DiagonalGaussian(mean, lv), q.updates + 1)


def avf_infer(f: IterativeInferenceModel, model: DynamicalModel, state: ModelState, x_t, K: int,
              rng: np.random.Generator, mode: ExpectationMode = MONTE_CARLO,
              prior: DiagonalGaussian | None = None, kl_weight: float = 1.0):
    """Run ``K`` rounds of {free energy, gradient, update} from the prior.

    Returns ``(q, trace)`` where ``trace`` has ``K + 1`` entries, the first at
    the prior. Entries after an update stay differentiable with respect to the
    inference network; only the last one also reaches the model parameters.
    """
    q, trace, _ = run_avf(f, model, state, x_t, K, rng, mode, prior, kl_weight)
    return q, trace


def run_avf(f, model, state, x_t, K, rng, mode=MONTE_CARLO, prior=None, kl_weight=1.0,
            frozen_model=None):
    """:func:`avf_infer` that also returns the latent samples of the last evaluation."""
    if K < 1:
        raise ValueError("K must be at least 1")
    frozen = frozen_model if frozen_model is not None else model.frozen()
    fstate = state.detach()
    if prior is None:
        prior = model.prior(state)
    fprior = prior.detach()
    q = init_at_prior(fprior)
    sfe0, g_mu, g_lv = posterior_gradient(frozen, fstate, x_t, q.lam.mean.value, q.lam.log_var.value,
                                          fprior, mode, rng, kl_weight)
    trace = [StepFreeEnergy(core.constant(sfe0.reconstruction.value), core.constant(sfe0.kl.value), kl_weight)]
    samples = []
    for k in range(1, K + 1):
        q = avf_update(f, q, (g_mu, g_lv), x_t)
        last = k == K
        sfe, samples = step_free_energy(model if last else frozen, state if last else fstate,
                                        x_t, q, mode, rng, prior if last else fprior, kl_weight)
        trace.append(sfe)
        if not last:
            _, g_mu, g_lv = posterior_gradient(frozen, fstate, x_t, q.lam.mean.value,
                                               q.lam.log_var.value, fprior, mode, rng, kl_weight)
    for entry in trace:
        if not np.all(np.isfinite(entry.total.value)):
            raise InferenceDivergence(len(trace) - 1, "non-finite free energy")
    return q, trace, samples
