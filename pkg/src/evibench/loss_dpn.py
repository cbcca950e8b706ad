"""Dirichlet prior-network objective: forward KL from fixed targets to the model.

In-distribution samples get a sharp smoothed target built from the label,

    mu_true = 1 - (K-1) * epsilon,   mu_other = epsilon,   alpha_hat = S_hat * mu

while out-of-distribution samples get the flat all-ones target.  The batch
loss is the mean of KL[target || model] within each group, the OOD group
scaled by `ood_weight`.  KL is target-first (forward), so only the model's
lgamma terms and the linear alpha terms carry gradients.

Targets are plain numbers, never graph nodes; rows whose target is exactly
all-ones are the OOD group (the smoothing invariants make that unambiguous).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as sps

from . import diff_engine as de
from .errors import ConfigError, DomainError, ShapeError
from .special_math import DirichletParams

__all__ = ["OOD_MARKER", "DpnConfig", "dpn_targets", "dpn_loss_batch"]

OOD_MARKER = -1


@dataclass(frozen=True)
class DpnConfig:
    """Target construction and mixing settings for the prior-network loss."""

    epsilon: float = 0.01
    target_strength: float = 100.0
    ood_weight: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ConfigError("epsilon", "must lie in (0, 1)")
        if self.target_strength <= 0.0:
            raise ConfigError("target_strength", "must be > 0")
        if self.ood_weight < 0.0:
            raise ConfigError("ood_weight", "must be >= 0")


def dpn_targets(label: int, k: int, cfg: DpnConfig) -> DirichletParams:
    """Target Dirichlet for one sample: sharp for a class label, flat for OOD.

    `label` is a class index in [0, K) or OOD_MARKER.
    """
    if k < 2:
        raise DomainError(f"need K >= 2 classes, got {k}")
    if label == OOD_MARKER:
        return DirichletParams(np.ones(k))
    if not (0 <= label < k):
        raise DomainError(f"label {label} outside [0, {k})")
    if cfg.epsilon >= 1.0 / k:
        raise ConfigError("epsilon", f"must be < 1/K = {1.0 / k:.6g}")
    if cfg.target_strength <= k:
        raise ConfigError("target_strength", f"must be > K = {k}")
    mu = np.full(k, cfg.epsilon)
    mu[label] = 1.0 - (k - 1) * cfg.epsilon
    return DirichletParams(cfg.target_strength * mu)


def _targets_matrix(targets, k: int) -> np.ndarray:
    if isinstance(targets, np.ndarray):
        t = np.asarray(targets, dtype=np.float64)
    else:
        rows = [
            t.alpha if isinstance(t, DirichletParams) else np.asarray(t, float)
            for t in targets
        ]
        t = np.stack(rows) if rows else np.empty((0, k))
    if t.ndim != 2 or (t.size and t.shape[1] != k):
        raise ShapeError(f"targets must be batch x {k}, got {t.shape}")
    if np.any(t <= 0.0) or not np.all(np.isfinite(t)):
        raise DomainError("target concentrations must be finite and > 0")
    return t


def dpn_loss_batch(model_alpha, targets, cfg: DpnConfig) -> de.Var:
    """Group-averaged forward KL from per-sample targets to the model output.

    `model_alpha` is batch x K (array or Var, all entries > 0); `targets` is
    a matching matrix or a sequence of DirichletParams.
    """
    q = model_alpha if isinstance(model_alpha, de.Var) else de.Var(np.asarray(model_alpha, dtype=np.float64))
    if q.value.ndim != 2:
        raise ShapeError(f"model_alpha must be 2-D, got {q.value.shape}")
    if np.any(q.value <= 0.0):
        raise DomainError("model concentrations must be > 0")
    b, k = q.value.shape
    t = _targets_matrix(targets, k)
    if t.shape[0] != b:
        raise ShapeError(f"{t.shape[0]} targets for a batch of {b}")
    if b == 0:
        raise DomainError("batch has no in-distribution and no OOD samples")

    ood_mask = np.all(t == 1.0, axis=1)
    in_mask = ~ood_mask

    # KL[Dir(t) || Dir(q)] rows; everything involving t alone is constant.
    s_t = t.sum(axis=1)
    const = (
        sps.gammaln(s_t)
        - sps.gammaln(t).sum(axis=1)
        + (t * (sps.psi(t) - sps.psi(s_t)[:, None])).sum(axis=1)
    )
    coeff = sps.psi(t) - sps.psi(s_t)[:, None]
    s_q = de.vsum(q, axis=1, keepdims=True)
    kl_rows = (
        const
        - de.vsum(de.lgamma(s_q), axis=1)
        + de.vsum(de.lgamma(q), axis=1)
        - de.vsum(q * coeff, axis=1)
    )

    total = de.Var(0.0)
    n_in, n_ood = int(in_mask.sum()), int(ood_mask.sum())
    if n_in:
        total = total + de.vsum(kl_rows * in_mask.astype(float)) / float(n_in)
    if n_ood:
        total = total + cfg.ood_weight * (
            de.vsum(kl_rows * ood_mask.astype(float)) / float(n_ood)
        )
    return total
