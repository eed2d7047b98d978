"""Correctness checks shared by the command line and the test suite: the
finite-difference gradient suite and the comparison against exact Kalman
filtering."""
from __future__ import annotations

import numpy as np

from . import core
from .distributions import DiagonalGaussian
from .filtering import FixedPosteriors, GradientInference, filter_sequence
from .inference import (ANALYTIC, MONTE_CARLO, ApproxPosterior, GradientEStepConfig,
                        IterativeInferenceModel, run_avf, step_free_energy)
from .kalman import kalman_filter_sequence
from .models import DeepSequenceModel, DynamicalModel, LinearGaussianSSM, make_lgssm


def lgssm_fixture(dim: int = 4) -> LinearGaussianSSM:
    """Stable diagonal fixtures: scalar (``dim=1``) or 4-dimensional."""
    if dim == 1:
        return make_lgssm([[0.9]], [0.1], [[1.0]], [0.0], [0.1], [0.0], [1.0])
    if dim == 4:
        return make_lgssm(np.diag([0.9, 0.5, -0.7, 0.99]), [0.1, 0.2, 0.05, 0.3],
                          np.diag([1.0, -0.5, 2.0, 0.8]), [0.1, 0.0, -0.2, 0.3],
                          [0.1, 0.3, 0.2, 0.5], np.zeros(4), np.ones(4))
    raise ValueError("fixtures exist for dim 1 and 4")


def lambda_gradient_check(model: DynamicalModel, x_seq, mode, seed: int, eps: float) -> float:
    """Gradient of the last step free energy with respect to ``[mean, log_var]``.

    Earlier steps advance the state on prior samples; the noise of the checked
    step is fixed so the function is deterministic.
    """
    frozen = model.frozen()
    rng = np.random.default_rng(seed)
    state = frozen.init_state()
    for x in x_seq[:-1]:
        prior = frozen.prior(state)
        if mode.kind == "analytic":
            state = frozen.update_state(state, x, prior.detach())
        else:
            z = prior.mean.value + np.sqrt(prior.var) * rng.standard_normal(prior.mean.shape)
            state = frozen.update_state(state, x, core.constant(z))
    prior = frozen.prior(state).detach()
    L = prior.mean.shape[-1]
    noise = [rng.standard_normal(L) for _ in range(mode.n_samples)]
    lam0 = np.concatenate([prior.mean.value + 0.3 * rng.standard_normal(L),
                           prior.log_var.value + 0.2 * rng.standard_normal(L)])

    def f(lam: core.Node) -> core.Node:
        mean, log_var = core.split(lam, [L, L])
        q = ApproxPosterior(DiagonalGaussian(mean, log_var))
        sfe, _ = step_free_energy(frozen, state, x_seq[-1], q, mode, None, prior, 1.0, noise)
        return core.reduce_sum(sfe.total)

    return core.finite_difference_check(f, lam0, eps)


def _sample_sequence(model: DynamicalModel, T: int, seed: int) -> np.ndarray:
    xs, _ = model.sample_sequence(T, np.random.default_rng(seed))
    return xs


def gradient_suite(model: DeepSequenceModel, seed: int = 0, T: int = 4, eps: float = 1e-4,
                   max_coords: int = 4, network: IterativeInferenceModel | None = None) -> dict[str, float]:
    """Max relative finite-difference error of each gradient the learner uses.

    * ``lambda_monte_carlo``: step free energy w.r.t. posterior parameters,
      common random numbers, on ``model``;
    * ``lambda_analytic``: the same under analytic expectations, on the
      4-dimensional linear Gaussian fixture (the only family with a
      closed-form reconstruction term);
    * ``theta_filter_total``: a whole filtering pass w.r.t. model parameters;
    * ``phi_post_update``: the free energy after one amortized update from the
      prior w.r.t. inference-network parameters. Later updates receive the
      posterior gradient as a detached input, and later steps see past
      samples as constants, so this is the unit the gradient is exact on.
    """
    xs = _sample_sequence(model, T, seed)
    lgssm = lgssm_fixture(4)
    report = {
        "lambda_monte_carlo": lambda_gradient_check(model, xs, MONTE_CARLO, seed, eps),
        "lambda_analytic": lambda_gradient_check(lgssm, _sample_sequence(lgssm, T, seed), ANALYTIC, seed, eps),
    }
    coord_rng = np.random.default_rng(seed)
    L = model.latent_dim
    lam_rng = np.random.default_rng([seed, 1])
    fixed = [DiagonalGaussian(0.5 * lam_rng.standard_normal(L), -1.0 + 0.3 * lam_rng.standard_normal(L))
             for _ in range(T)]

    def theta_loss():
        # posteriors that do not depend on the model, so every path to theta is differentiated
        return filter_sequence(model, FixedPosteriors(fixed), xs, np.random.default_rng(seed),
                               build_loss=True).loss

    report["theta_filter_total"] = core.gradcheck_nodes(theta_loss, model.parameters(), eps,
                                                        max_coords, coord_rng)
    if network is None:
        network = IterativeInferenceModel(model.latent_dim, model.obs_dim, width=16, seed=seed)
    frozen = model.frozen()
    state = frozen.init_state()
    for x in xs[:-1]:
        state = frozen.update_state(state, x, core.constant(fixed[0].mean.value))

    def phi_loss():
        _, steps, _ = run_avf(network, frozen, state, xs[-1], 1, np.random.default_rng(seed))
        return core.reduce_sum(steps[1].total)

    report["phi_post_update"] = core.gradcheck_nodes(phi_loss, network.parameters(), eps,
                                                     max_coords, coord_rng)
    return report


def kalman_equivalence(model: LinearGaussianSSM, xs, iterations: int = 500,
                       step_size: float = 0.05) -> dict:
    """Filter ``xs`` with analytic gradient E-steps and compare to the Kalman filter.

    Returns per-step absolute mean errors (max over latent dimensions) and
    per-step gaps between the step free energy and the exact
    ``-log p(x_t | x_{<t})``.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
    cfg = GradientEStepConfig(iterations, step_size, expectation=ANALYTIC)
    trace = filter_sequence(model, GradientInference(cfg), xs, np.random.default_rng(0))
    beliefs, total, steps = kalman_filter_sequence(model, xs, return_steps=True)
    mean_err = np.array([np.max(np.abs(m - b.mean)) for (m, _), b in zip(trace.posterior_params, beliefs)])
    fe = np.array([float(s.total.value) for s in trace.per_step])
    gap = fe + steps
    return {"T": len(xs), "mean_error": mean_err, "free_energy": fe, "step_nll": -steps,
            "free_energy_gap": gap, "total_free_energy": float(fe.sum()), "total_nll": -total}
