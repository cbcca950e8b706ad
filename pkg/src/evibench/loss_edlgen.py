"""Contrastive density-ratio objective with a misclassification regulariser.

Each class k gets a binary discriminator head whose logit approximates the
log density ratio ln(P_k / P_out) against a reference OOD distribution.
Heads are trained with the Bernoulli log loss: in-distribution samples are
positives for their own class head only, OOD samples are negatives for all
K heads.  Evidence is recovered as e_k = exp(min(logit_k, clamp)), and a
second term pushes the off-class slice of alpha toward the flat Dirichlet
so that wrong-class evidence is penalised directly.

Batch losses return a `Var`; use ``.item()`` for the plain number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff_engine as de
from .errors import ConfigError, DomainError, ShapeError
from .loss_edl import _check_one_hot
from .special_math import lgamma as lgamma_scalar

__all__ = [
    "EdlGenConfig",
    "evidence_from_logits",
    "bernoulli_contrastive_loss",
    "misclassification_regularizer",
    "beta_coefficient",
]


@dataclass(frozen=True)
class EdlGenConfig:
    """Contrastive head settings: regulariser schedule, clamp, OOD mix."""

    beta_mode: str = "constant"
    beta_value: float = 1.0
    logit_clamp: float = 10.0
    ood_batch_ratio: float = 1.0
    annealing_step: int = 10

    def __post_init__(self):
        if self.beta_mode not in ("constant", "annealed"):
            raise ConfigError("beta_mode", "must be 'constant' or 'annealed'")
        if self.beta_value < 0.0:
            raise ConfigError("beta_value", "must be >= 0")
        if self.logit_clamp <= 0.0:
            raise ConfigError("logit_clamp", "must be > 0")
        if self.ood_batch_ratio <= 0.0:
            raise ConfigError("ood_batch_ratio", "must be > 0")
        if not isinstance(self.annealing_step, int) or self.annealing_step < 1:
            raise ConfigError("annealing_step", "must be an integer >= 1")


def beta_coefficient(t: int, cfg: EdlGenConfig) -> float:
    """Regulariser weight at epoch t under the configured schedule."""
    if t < 0:
        raise DomainError(f"epoch index must be >= 0, got {t}")
    if cfg.beta_mode == "constant":
        return cfg.beta_value
    return cfg.beta_value * min(1.0, t / cfg.annealing_step)


def evidence_from_logits(logits, cfg: EdlGenConfig):
    """Map density-ratio logits to evidence: e = exp(min(logit, clamp)).

    Returns a Var for Var input, a plain array otherwise.
    """
    if isinstance(logits, de.Var):
        return de.exp(de.clip_max(logits, cfg.logit_clamp))
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    return np.exp(np.minimum(z, cfg.logit_clamp))


def bernoulli_contrastive_loss(logits_in, labels, logits_ood) -> de.Var:
    """Mean discriminator loss over in-distribution positives and OOD negatives.

    In-dist samples contribute -ln sigma(logit at the true class); each OOD
    sample contributes the across-head mean of -ln(1 - sigma(logit)).
    """
    z_in = logits_in if isinstance(logits_in, de.Var) else de.Var(np.asarray(logits_in, dtype=np.float64))
    z_ood = logits_ood if isinstance(logits_ood, de.Var) else de.Var(np.asarray(logits_ood, dtype=np.float64))
    if z_in.value.ndim != 2 or z_ood.value.ndim != 2:
        raise ShapeError("logit batches must be 2-D")
    if z_in.value.shape[0] == 0:
        raise DomainError("in-distribution batch is empty")
    if z_ood.value.shape[0] == 0:
        raise DomainError("OOD batch is empty; the loss is contrastive")
    if z_in.value.shape[1] != z_ood.value.shape[1]:
        raise ShapeError("in-dist and OOD batches disagree on class count")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != z_in.value.shape:
        raise ShapeError(f"labels shape {y.shape} does not match logits {z_in.value.shape}")
    _check_one_hot(y)

    # -ln sigma(z) = softplus(-z);  -ln(1 - sigma(z)) = softplus(z).
    true_logit = de.vsum(z_in * y, axis=1)
    pos_term = de.vmean(de.softplus(-true_logit))
    neg_term = de.vmean(de.softplus(z_ood))
    return pos_term + neg_term


def misclassification_regularizer(alpha, labels, beta_t: float) -> de.Var:
    """beta_t times the mean KL of each sample's off-class alpha slice vs flat.

    The true-class coordinate is dropped, leaving a (K-1)-dimensional
    Dirichlet; for K=2 that slice is a single coordinate and the term is 0
    by convention.
    """
    a = alpha if isinstance(alpha, de.Var) else de.Var(np.asarray(alpha, dtype=np.float64))
    if a.value.ndim != 2:
        raise ShapeError(f"alpha must be batch x K, got {a.value.shape}")
    if np.any(a.value <= 0.0):
        raise DomainError("alpha entries must be > 0")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != a.value.shape:
        raise ShapeError(f"labels shape {y.shape} does not match alpha {a.value.shape}")
    _check_one_hot(y)
    k = a.value.shape[1]
    if k == 2 or beta_t == 0.0:
        return de.Var(0.0)

    # Setting the true-class entry to 1 makes it drop out of every term of
    # the (K-1)-dim KL; the slice strength is then the row sum minus 1.
    masked = y + (1.0 - y) * a
    s_minus = de.vsum(masked, axis=1, keepdims=True) - 1.0
    inner = de.vsum(
        (masked - 1.0) * (de.digamma(masked) - de.digamma(s_minus)), axis=1
    )
    kl_rows = (
        de.vsum(de.lgamma(s_minus), axis=1)
        - lgamma_scalar(float(k - 1))
        - de.vsum(de.lgamma(masked), axis=1)
        + inner
    )
    return beta_t * de.vmean(kl_rows)
