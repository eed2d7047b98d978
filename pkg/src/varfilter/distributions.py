"""Diagonal Gaussian, Bernoulli and discretized Gaussian densities.

All functions reduce over the last axis, so a batch of vectors of shape
``(B, d)`` yields ``B`` log-probabilities and a single vector yields a scalar.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import Node, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))
PROB_FLOOR = 1e-12


def _node(x) -> Node:
    return x if isinstance(x, Node) else core.constant(x)


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: Node
    log_var: Node

    def __post_init__(self):
        object.__setattr__(self, "mean", _node(self.mean))
        object.__setattr__(self, "log_var", _node(self.log_var))
        if self.mean.shape != self.log_var.shape:
            raise ShapeError("DiagonalGaussian", [self.mean.shape, self.log_var.shape])
        lv = self.log_var.value
        if not (np.all(np.isfinite(lv)) and np.all(np.isfinite(self.mean.value))):
            raise core.DomainError("DiagonalGaussian parameters must be finite")
        if np.any(lv < -700.0) or np.any(lv > 700.0):
            raise core.DomainError("DiagonalGaussian variance underflows or overflows")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var.value)

    def detach(self) -> DiagonalGaussian:
        return DiagonalGaussian(core.stop_gradient(self.mean), core.stop_gradient(self.log_var))

    def log_prob(self, x) -> Node:
        return gaussian_log_prob(x, self)


@dataclass(frozen=True)
class Bernoulli:
    logits: Node

    def __post_init__(self):
        object.__setattr__(self, "logits", _node(self.logits))

    @property
    def probs(self) -> np.ndarray:
        return core._sigmoid(self.logits.value)

    def log_prob(self, x) -> Node:
        return bernoulli_log_prob(x, self)


@dataclass(frozen=True)
class DiscretizedGaussian:
    mean: Node
    log_var: Node
    bin_width: float

    def __post_init__(self):
        object.__setattr__(self, "mean", _node(self.mean))
        object.__setattr__(self, "log_var", _node(self.log_var))
        if not self.bin_width > 0:
            raise ValueError(f"bin_width must be positive, got {self.bin_width}")
        if self.mean.shape != self.log_var.shape:
            raise ShapeError("DiscretizedGaussian", [self.mean.shape, self.log_var.shape])

    def log_prob(self, x) -> Node:
        return discretized_gaussian_log_prob(x, self)


def _check_dims(kind, *shapes):
    if len({s[-1] if s else None for s in shapes}) != 1:
        raise ShapeError(kind, shapes, "last dimensions differ")


def gaussian_log_prob(x, d: DiagonalGaussian) -> Node:
    x = _node(x)
    _check_dims("gaussian_log_prob", x.shape, d.mean.shape)
    diff = x - d.mean
    terms = (core.square(diff) * core.exp(-d.log_var) + d.log_var + LOG_2PI) * -0.5
    return core.reduce_sum(terms, axis=-1)


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> Node:
    """KL(q || p) between diagonal Gaussians, summed over dimensions."""
    _check_dims("gaussian_kl", q.mean.shape, p.mean.shape)
    ratio = core.exp(q.log_var - p.log_var)
    maha = core.square(q.mean - p.mean) * core.exp(-p.log_var)
    terms = (ratio + maha - 1.0 - (q.log_var - p.log_var)) * 0.5
    return core.reduce_sum(terms, axis=-1)


def reparameterized_sample(d: DiagonalGaussian, noise) -> Node:
    """``mean + exp(log_var / 2) * noise``; no gradient reaches ``noise``."""
    eps = np.asarray(noise.value if isinstance(noise, Node) else noise, dtype=np.float64)
    if eps.shape[-1:] != d.mean.shape[-1:]:
        raise ShapeError("reparameterized_sample", [d.mean.shape, eps.shape])
    return d.mean + core.exp(d.log_var * 0.5) * eps


def bernoulli_log_prob(x, d: Bernoulli) -> Node:
    xv = np.asarray(x.value if isinstance(x, Node) else x, dtype=np.float64)
    if not np.all((xv == 0.0) | (xv == 1.0)):
        raise ValueError("bernoulli_log_prob expects binary observations")
    _check_dims("bernoulli_log_prob", xv.shape, d.logits.shape)
    # x*l - log(1 + e^l) == x*log(sigmoid(l)) + (1-x)*log(1-sigmoid(l))
    return core.reduce_sum(d.logits * xv - core.softplus(d.logits), axis=-1)


def discretized_gaussian_log_prob(x, d: DiscretizedGaussian) -> Node:
    """Log mass of the Gaussian over the bin ``[x - w/2, x + w/2]`` per entry."""
    x = _node(x)
    _check_dims("discretized_gaussian_log_prob", x.shape, d.mean.shape)
    inv_sd = core.exp(d.log_var * -0.5)
    half = 0.5 * d.bin_width
    lo = (x - half - d.mean) * inv_sd
    hi = (x + half - d.mean) * inv_sd
    return core.reduce_sum(core.log_normal_interval(lo, hi, floor=PROB_FLOOR), axis=-1)


def expected_linear_gaussian_loglik(x, C, b, R_diag, q: DiagonalGaussian, log_R=None) -> Node:
    """Exact ``E_{z~q}[log N(x; C z + b, diag(R))]``.

    ``C`` has shape ``(m, n)``. Pass ``log_R`` instead of ``R_diag`` when the
    noise variance is a log-parameterized node.
    """
    C, b = _node(C), _node(b)
    if log_R is None:
        R = _node(R_diag)
        if np.any(R.value <= 0):
            raise core.DomainError("R_diag entries must be positive")
        log_R = core.log(R)
    if C.ndim != 2 or C.shape[1] != q.mean.shape[-1] or C.shape[0] != _node(x).shape[-1]:
        raise ShapeError("expected_linear_gaussian_loglik", [C.shape, q.mean.shape, _node(x).shape])
    at_mean = DiagonalGaussian(core.matmul(q.mean, core.transpose(C)) + b,
                               core.broadcast(log_R, q.mean.shape[:-1] + log_R.shape))
    spread = core.matmul(core.exp(q.log_var), core.transpose(core.square(C)))
    penalty = core.reduce_sum(spread * core.exp(-log_R), axis=-1) * 0.5
    return gaussian_log_prob(x, at_mean) - penalty


def log_prob(x, d) -> Node:
    """Dispatch to the family's log-probability."""
    return d.log_prob(x)
