"""Dynamical latent variable models: prior (dynamics), decoder, recurrent state.

Two models share one interface:

* :class:`LinearGaussianSSM` -- ``z_t ~ N(A z_{t-1}, Q)``, ``x_t ~ N(C z_t + b, R)``.
* :class:`DeepSequenceModel` -- a gated recurrent state over ``[x_{t-1}, z_{t-1}]``
  feeding two-layer prior and decoder networks.

Parameters live in ``model.params`` (name -> :class:`~varfilter.core.Node`).
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .core import Node, ShapeError
from .distributions import Bernoulli, DiagonalGaussian, DiscretizedGaussian

OUTPUT_FAMILIES = ("gaussian", "bernoulli", "discretized_gaussian")
CHECKPOINT_FORMAT = "varfilter-checkpoint/1"


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelState:
    """Filtering context for step ``step_index + 1``.

    For the deep model ``hidden`` is the recurrent vector. For the linear
    Gaussian model it is the previous latent ``z_{t-1}``; ``latent_var``
    additionally carries its variance when past expectations are propagated
    exactly instead of sampled.
    """
    hidden: Node | None
    step_index: int = 0
    batch_shape: tuple = ()
    latent_var: Node | None = None

    def detach(self) -> ModelState:
        return ModelState(
            None if self.hidden is None else core.stop_gradient(self.hidden),
            self.step_index, self.batch_shape,
            None if self.latent_var is None else core.stop_gradient(self.latent_var))


class DynamicalModel:
    """Base class: parameter bookkeeping and sequence helpers."""

    kind = "base"
    supports_analytic = False
    latent_dim: int
    obs_dim: int
    output_family: str

    def __init__(self):
        self.params: dict[str, Node] = {}

    def _p(self, name: str) -> Node:
        return self.params[name]

    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def frozen(self) -> DynamicalModel:
        """A view sharing parameter values but blocking gradients into them."""
        view = copy.copy(self)
        view.params = {k: core.stop_gradient(v) for k, v in self.params.items()}
        return view

    def hyperparameters(self) -> dict:
        raise NotImplementedError

    def init_state(self, batch_shape: tuple = ()) -> ModelState:
        raise NotImplementedError

    def prior(self, state: ModelState) -> DiagonalGaussian:
        raise NotImplementedError

    def decode(self, state: ModelState, z: Node):
        raise NotImplementedError

    def update_state(self, state: ModelState, x_t, z_t) -> ModelState:
        raise NotImplementedError

    def _check_latent(self, z: Node):
        if z.shape[-1:] != (self.latent_dim,):
            raise ShapeError(f"{self.kind}.decode", [z.shape, (self.latent_dim,)])

    def sample_sequence(self, T: int, rng: np.random.Generator, batch_shape: tuple = ()):
        """Ancestral sample of ``(x_{1:T}, z_{1:T})`` as arrays ``(T, *batch, dim)``."""
        model = self.frozen()
        state = model.init_state(batch_shape)
        xs, zs = [], []
        for _ in range(T):
            p = model.prior(state)
            z = p.mean.value + np.exp(0.5 * p.log_var.value) * rng.standard_normal(p.mean.shape)
            out = model.decode(state, core.constant(z))
            x = sample_output(out, rng)
            xs.append(x)
            zs.append(z)
            state = model.update_state(state, core.constant(x), core.constant(z))
        return np.stack(xs), np.stack(zs)

    def joint_log_prob(self, x_seq, z_seq) -> Node:
        """``log p(x_{1:T}, z_{1:T})`` as one density over the stacked trajectory."""
        state = self.init_state(np.shape(x_seq)[1:-1])
        prior_means, prior_lvs, obs_terms = [], [], []
        for x, z in zip(x_seq, z_seq):
            p = self.prior(state)
            prior_means.append(p.mean)
            prior_lvs.append(p.log_var)
            obs_terms.append(self.decode(state, core.constant(z)))
            state = self.update_state(state, core.constant(x), core.constant(z))
        stacked = DiagonalGaussian(core.concat(prior_means), core.concat(prior_lvs))
        z_flat = np.concatenate(list(z_seq), axis=-1)
        x_flat = np.concatenate(list(x_seq), axis=-1)
        return stacked.log_prob(z_flat) + _stack_outputs(obs_terms).log_prob(x_flat)


def sample_output(dist, rng: np.random.Generator) -> np.ndarray:
    if isinstance(dist, Bernoulli):
        return (rng.random(dist.logits.shape) < dist.probs).astype(np.float64)
    return dist.mean.value + np.exp(0.5 * dist.log_var.value) * rng.standard_normal(dist.mean.shape)


def _stack_outputs(dists):
    first = dists[0]
    if isinstance(first, Bernoulli):
        return Bernoulli(core.concat([d.logits for d in dists]))
    mean = core.concat([d.mean for d in dists])
    lv = core.concat([d.log_var for d in dists])
    if isinstance(first, DiscretizedGaussian):
        return DiscretizedGaussian(mean, lv, first.bin_width)
    return DiagonalGaussian(mean, lv)


# --- linear Gaussian state-space model ----------------------------------------

class LinearGaussianSSM(DynamicalModel):
    kind = "lgssm"
    supports_analytic = True
    output_family = "gaussian"

    def __init__(self, A, Q_diag, C, b, R_diag, init_mean, init_var_diag):
        super().__init__()
        A, C = np.atleast_2d(np.asarray(A, float)), np.atleast_2d(np.asarray(C, float))
        Q, R = np.atleast_1d(np.asarray(Q_diag, float)), np.atleast_1d(np.asarray(R_diag, float))
        b = np.atleast_1d(np.asarray(b, float))
        m0, v0 = np.atleast_1d(np.asarray(init_mean, float)), np.atleast_1d(np.asarray(init_var_diag, float))
        n, m = A.shape[0], C.shape[0]
        problems = []
        if A.shape != (n, n):
            problems.append(f"A must be square, got {A.shape}")
        if C.shape != (m, n):
            problems.append(f"C must be ({m}, {n}), got {C.shape}")
        for name, arr, size in (("Q_diag", Q, n), ("R_diag", R, m), ("b", b, m),
                                ("init_mean", m0, n), ("init_var_diag", v0, n)):
            if arr.shape != (size,):
                problems.append(f"{name} must have length {size}, got {arr.shape}")
        for name, arr in (("Q_diag", Q), ("R_diag", R), ("init_var_diag", v0)):
            if np.any(~(arr > 0)):
                problems.append(f"{name} must be strictly positive")
        for name, arr in (("A", A), ("C", C), ("b", b), ("init_mean", m0)):
            if not np.all(np.isfinite(arr)):
                problems.append(f"{name} must be finite")
        if problems:
            raise ModelConfigError("invalid LGSSM: " + "; ".join(problems))
        self.latent_dim, self.obs_dim = n, m
        self.params = {
            "A": core.parameter(A), "log_Q": core.parameter(np.log(Q)),
            "C": core.parameter(C), "b": core.parameter(b), "log_R": core.parameter(np.log(R)),
            "init_mean": core.parameter(m0), "init_log_var": core.parameter(np.log(v0)),
        }

    # plain-array views, used by the Kalman oracle
    @property
    def A(self):
        return self.params["A"].value

    @property
    def Q_diag(self):
        return np.exp(self.params["log_Q"].value)

    @property
    def C(self):
        return self.params["C"].value

    @property
    def b(self):
        return self.params["b"].value

    @property
    def R_diag(self):
        return np.exp(self.params["log_R"].value)

    @property
    def init_mean(self):
        return self.params["init_mean"].value

    @property
    def init_var_diag(self):
        return np.exp(self.params["init_log_var"].value)

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "latent_dim": self.latent_dim, "obs_dim": self.obs_dim}

    def init_state(self, batch_shape: tuple = ()) -> ModelState:
        return ModelState(None, 0, tuple(batch_shape))

    def prior(self, state: ModelState) -> DiagonalGaussian:
        shape = state.batch_shape + (self.latent_dim,)
        if state.step_index == 0:
            return DiagonalGaussian(core.broadcast(self._p("init_mean"), shape),
                                    core.broadcast(self._p("init_log_var"), shape))
        A = self._p("A")
        mean = core.matmul(state.hidden, core.transpose(A))
        if state.latent_var is None:
            return DiagonalGaussian(mean, core.broadcast(self._p("log_Q"), shape))
        # moment-propagated predictive: diag(A diag(v) A^T) + Q
        spread = core.matmul(state.latent_var, core.transpose(core.square(A)))
        return DiagonalGaussian(mean, core.log(spread + core.exp(self._p("log_Q"))))

    def decode(self, state: ModelState, z) -> DiagonalGaussian:
        z = core._as_node(z)
        self._check_latent(z)
        mean = core.matmul(z, core.transpose(self._p("C"))) + self._p("b")
        return DiagonalGaussian(mean, core.broadcast(self._p("log_R"), mean.shape))

    def expected_loglik(self, state: ModelState, x, q: DiagonalGaussian) -> Node:
        from .distributions import expected_linear_gaussian_loglik
        return expected_linear_gaussian_loglik(x, self._p("C"), self._p("b"), None, q,
                                               log_R=self._p("log_R"))

    def update_state(self, state: ModelState, x_t, z_t) -> ModelState:
        """Store ``z_t``; a :class:`DiagonalGaussian` stores its mean and variance."""
        if isinstance(z_t, DiagonalGaussian):
            return ModelState(z_t.mean, state.step_index + 1, state.batch_shape,
                              core.exp(z_t.log_var))
        z_t = core._as_node(z_t)
        self._check_latent(z_t)
        return ModelState(z_t, state.step_index + 1, state.batch_shape)


def make_lgssm(A, Q_diag, C, b, R_diag, init_mean, init_var_diag) -> LinearGaussianSSM:
    return LinearGaussianSSM(A, Q_diag, C, b, R_diag, init_mean, init_var_diag)


# --- deep recurrent latent model --------------------------------------------------

def _uniform(rng, fan_in, shape):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def dense(params: dict[str, Node], prefix: str, x: Node) -> Node:
    return core.matmul(x, params[prefix + ".W"]) + params[prefix + ".b"]


class DeepSequenceModel(DynamicalModel):
    kind = "deep"

    def __init__(self, obs_dim: int, latent_dim: int = 8, hidden_dim: int = 64,
                 width: int = 64, output_family: str = "gaussian", bin_width: float | None = None,
                 seed: int = 0):
        super().__init__()
        if output_family not in OUTPUT_FAMILIES:
            raise ModelConfigError(f"output_family must be one of {OUTPUT_FAMILIES}, got {output_family!r}")
        if output_family == "discretized_gaussian" and not (bin_width and bin_width > 0):
            raise ModelConfigError("discretized_gaussian output requires a positive bin_width")
        for name, v in (("obs_dim", obs_dim), ("latent_dim", latent_dim),
                        ("hidden_dim", hidden_dim), ("width", width)):
            if int(v) != v or v < 1:
                raise ModelConfigError(f"{name} must be a positive integer, got {v!r}")
        self.obs_dim, self.latent_dim = int(obs_dim), int(latent_dim)
        self.hidden_dim, self.width = int(hidden_dim), int(width)
        self.output_family, self.bin_width, self.seed = output_family, bin_width, seed
        rng = np.random.default_rng(seed)
        inp, h, w, L, m = obs_dim + latent_dim, hidden_dim, width, latent_dim, obs_dim
        out_dim = m if output_family == "bernoulli" else 2 * m
        shapes = {}
        for gate in ("z", "r", "n"):
            shapes[f"gru.W_{gate}"] = (inp, h)
            shapes[f"gru.U_{gate}"] = (h, h)
        for prefix, fan_in, fan_out in (("prior.l1", h, w), ("prior.l2", w, w), ("prior.out", w, 2 * L),
                                        ("dec.l1", h + L, w), ("dec.l2", w, w), ("dec.out", w, out_dim)):
            shapes[prefix + ".W"] = (fan_in, fan_out)
        params = {}
        for name, shape in shapes.items():
            params[name] = core.parameter(_uniform(rng, shape[0], shape))
        for gate in ("z", "r", "n"):
            params[f"gru.b_{gate}"] = core.parameter(np.zeros(h))
        for prefix, size in (("prior.l1", w), ("prior.l2", w), ("prior.out", 2 * L),
                             ("dec.l1", w), ("dec.l2", w), ("dec.out", out_dim)):
            params[prefix + ".b"] = core.parameter(np.zeros(size))
        params["prior0.mean"] = core.parameter(np.zeros(L))
        params["prior0.log_var"] = core.parameter(np.zeros(L))
        self.params = params

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "obs_dim": self.obs_dim, "latent_dim": self.latent_dim,
                "hidden_dim": self.hidden_dim, "width": self.width,
                "output_family": self.output_family, "bin_width": self.bin_width, "seed": self.seed}

    def init_state(self, batch_shape: tuple = ()) -> ModelState:
        return ModelState(core.constant(np.zeros(tuple(batch_shape) + (self.hidden_dim,))),
                          0, tuple(batch_shape))

    def _mlp(self, prefix: str, x: Node) -> Node:
        act = core.clipped_leaky_relu
        x = act(dense(self.params, prefix + ".l1", x))
        x = act(dense(self.params, prefix + ".l2", x))
        return dense(self.params, prefix + ".out", x)

    def prior(self, state: ModelState) -> DiagonalGaussian:
        if state.step_index == 0:
            shape = state.batch_shape + (self.latent_dim,)
            return DiagonalGaussian(core.broadcast(self._p("prior0.mean"), shape),
                                    core.broadcast(self._p("prior0.log_var"), shape))
        mean, log_var = core.split(self._mlp("prior", state.hidden), [self.latent_dim] * 2)
        return DiagonalGaussian(mean, log_var)

    def decode(self, state: ModelState, z):
        z = core._as_node(z)
        self._check_latent(z)
        if z.shape[:-1] != state.batch_shape:
            raise ShapeError("deep.decode", [z.shape, state.batch_shape + (self.latent_dim,)])
        out = self._mlp("dec", core.concat([state.hidden, z]))
        if self.output_family == "bernoulli":
            return Bernoulli(out)
        mean, log_var = core.split(out, [self.obs_dim] * 2)
        if self.output_family == "discretized_gaussian":
            return DiscretizedGaussian(mean, log_var, self.bin_width)
        return DiagonalGaussian(mean, log_var)

    def update_state(self, state: ModelState, x_t, z_t) -> ModelState:
        if isinstance(z_t, DiagonalGaussian):
            raise TypeError("the deep model consumes latent samples, not distributions")
        x_t, z_t = core._as_node(x_t), core._as_node(z_t)
        if x_t.shape[-1:] != (self.obs_dim,):
            raise ShapeError("deep.update_state", [x_t.shape, (self.obs_dim,)])
        self._check_latent(z_t)
        p, h = self.params, state.hidden
        inp = core.concat([x_t, z_t])
        zg = core.sigmoid(core.matmul(inp, p["gru.W_z"]) + core.matmul(h, p["gru.U_z"]) + p["gru.b_z"])
        r = core.sigmoid(core.matmul(inp, p["gru.W_r"]) + core.matmul(h, p["gru.U_r"]) + p["gru.b_r"])
        n = core.tanh(core.matmul(inp, p["gru.W_n"]) + core.matmul(r * h, p["gru.U_n"]) + p["gru.b_n"])
        new_h = n + zg * (h - n)
        return ModelState(new_h, state.step_index + 1, state.batch_shape)


def make_deep_model(dims: dict, seed: int = 0) -> DeepSequenceModel:
    """``dims`` holds ``obs_dim`` and optionally latent_dim, hidden_dim, width,
    output_family and bin_width."""
    return DeepSequenceModel(seed=seed, **dims)


# --- checkpoints ------------------------------------------------------------------

def _tensor_record(name: str, value: np.ndarray) -> dict:
    return {"name": name, "shape": list(value.shape),
            "values": [float(v) for v in value.reshape(-1)]}


def model_from_hyperparameters(hp: dict) -> DynamicalModel:
    hp = dict(hp)
    kind = hp.pop("kind")
    if kind == "lgssm":
        n, m = hp["latent_dim"], hp["obs_dim"]
        return LinearGaussianSSM(np.eye(n), np.ones(n), np.zeros((m, n)), np.zeros(m),
                                 np.ones(m), np.zeros(n), np.ones(n))
    if kind == "deep":
        return DeepSequenceModel(**hp)
    raise ModelConfigError(f"unknown model kind {kind!r}")


def load_tensors(target: dict[str, Node], records: list[dict], owner: str) -> None:
    """Copy saved tensors into ``target``, listing every name/shape conflict."""
    saved = {r["name"]: r for r in records}
    conflicts = []
    for name in sorted(set(saved) | set(target)):
        if name not in saved:
            conflicts.append(f"{owner}.{name}: missing from checkpoint")
        elif name not in target:
            conflicts.append(f"{owner}.{name}: not a parameter of the configured model")
        elif tuple(saved[name]["shape"]) != target[name].shape:
            conflicts.append(f"{owner}.{name}: checkpoint shape {tuple(saved[name]['shape'])} "
                             f"!= model shape {target[name].shape}")
    if conflicts:
        raise ModelConfigError("checkpoint/model mismatch: " + "; ".join(conflicts))
    for name, node in target.items():
        rec = saved[name]
        node.value = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
        node.grad = np.zeros_like(node.value)


def save_checkpoint(path, model: DynamicalModel, inference_model=None, extra: dict | None = None) -> None:
    """Write a JSON container of named float64 tensors plus hyperparameters.

    Floats are written with ``repr`` so values round-trip bit-exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": {"hyperparameters": model.hyperparameters(),
                  "tensors": [_tensor_record(k, v.value) for k, v in model.params.items()]},
        "inference_model": None,
        "extra": extra or {},
    }
    if inference_model is not None:
        doc["inference_model"] = {
            "hyperparameters": inference_model.hyperparameters(),
            "tensors": [_tensor_record(k, v.value) for k, v in inference_model.params.items()]}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ModelConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return doc


def load_checkpoint(path):
    """Rebuild ``(model, inference_model_or_None)`` from a checkpoint file."""
    from .inference import IterativeInferenceModel
    doc = read_checkpoint(path)
    model = model_from_hyperparameters(doc["model"]["hyperparameters"])
    load_tensors(model.params, doc["model"]["tensors"], "model")
    inf = None
    if doc.get("inference_model"):
        inf = IterativeInferenceModel(**doc["inference_model"]["hyperparameters"])
        load_tensors(inf.params, doc["inference_model"]["tensors"], "inference_model")
    return model, inf
