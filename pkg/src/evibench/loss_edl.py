"""Evidential log loss with annealed KL regularisation toward the flat Dirichlet.

Per sample with one-hot label y, evidence e and alpha = e + 1:

    L_i  = sum_j y_ij (ln S_i - ln alpha_ij),          S_i = sum_j alpha_ij
    KL_i = KL[ Dir(alpha~_i) || Dir(1,...,1) ],        alpha~ = y + (1-y) * alpha
    loss = mean_i L_i + lambda_t * mean_i KL_i

alpha~ keeps only the misleading (off-class) evidence, so the regulariser is
zero exactly when a sample carries no evidence for wrong classes.  The
coefficient lambda_t ramps linearly over the first `annealing_step` epochs.

Batch losses return a `Var` so they can sit inside a recorded graph; use
``.item()`` for the plain number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff_engine as de
from .errors import ConfigError, DomainError, ShapeError
from .special_math import DirichletParams, lgamma as lgamma_scalar

__all__ = ["EdlConfig", "annealing_coefficient", "alpha_tilde", "edl_loss_batch"]


@dataclass(frozen=True)
class EdlConfig:
    """EDL head settings: KL ramp length and class count."""

    annealing_step: int = 10
    K: int = 2

    def __post_init__(self):
        if not isinstance(self.annealing_step, int) or self.annealing_step < 1:
            raise ConfigError("annealing_step", "must be an integer >= 1")
        if not isinstance(self.K, int) or self.K < 2:
            raise ConfigError("K", "must be an integer >= 2")


def annealing_coefficient(t: int, cfg: EdlConfig) -> float:
    """KL weight at epoch t: min(1, t / annealing_step)."""
    if t < 0:
        raise DomainError(f"epoch index must be >= 0, got {t}")
    return min(1.0, t / cfg.annealing_step)


def _check_one_hot(y: np.ndarray) -> None:
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=-1) == 1.0)):
        raise DomainError("labels must be one-hot rows")


def alpha_tilde(alpha: DirichletParams, y) -> DirichletParams:
    """Remove non-misleading evidence: the true-class entry is reset to 1."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (alpha.K,):
        raise ShapeError(f"label shape {y.shape} does not match K={alpha.K}")
    _check_one_hot(y)
    return DirichletParams(y + (1.0 - y) * alpha.alpha)


def kl_uniform_term(alpha, k: int) -> de.Var:
    """Per-row KL[Dir(alpha) || flat] as a graph expression; returns shape (B,).

    Same closed form as special_math.kl_dirichlet_vs_uniform, built from
    engine primitives so it is differentiable in alpha.
    """
    s = de.vsum(alpha, axis=1, keepdims=True)
    inner = de.vsum(
        (alpha - 1.0) * (de.digamma(alpha) - de.digamma(s)), axis=1
    )
    return (
        de.vsum(de.lgamma(s), axis=1)
        - lgamma_scalar(float(k))
        - de.vsum(de.lgamma(alpha), axis=1)
        + inner
    )


def edl_loss_batch(evidence, labels, t: int, cfg: EdlConfig) -> de.Var:
    """Mean evidential log loss plus the annealed KL term over a batch.

    `evidence` is batch x K (array or Var), `labels` one-hot batch x K.
    """
    ev = evidence if isinstance(evidence, de.Var) else de.Var(np.asarray(evidence, dtype=np.float64))
    if ev.value.ndim != 2 or ev.value.shape[1] != cfg.K:
        raise ShapeError(f"evidence must be batch x {cfg.K}, got {ev.value.shape}")
    if np.any(ev.value < 0.0):
        raise DomainError("evidence must be non-negative")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != ev.value.shape:
        raise ShapeError(f"labels shape {y.shape} does not match evidence {ev.value.shape}")
    _check_one_hot(y)

    alpha = ev + 1.0
    s = de.vsum(alpha, axis=1, keepdims=True)
    data_term = de.vmean(de.vsum(y * (de.log(s) - de.log(alpha)), axis=1))

    lam = annealing_coefficient(t, cfg)
    if lam == 0.0:
        return data_term
    a_tilde = y + (1.0 - y) * alpha
    return data_term + lam * de.vmean(kl_uniform_term(a_tilde, cfg.K))
