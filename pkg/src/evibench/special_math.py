"""Scalar special functions and closed-form Dirichlet KL divergences.

Every loss head in the workbench reduces to log-gamma / digamma evaluations
plus one of the two KL forms below, so this module is the single place where
those formulas live.  ``lgamma``/``digamma`` are thin validated fronts over
scipy.special; the KL divergences are written out explicitly.

Functions here are scalar-in/scalar-out (callers loop or vectorise
themselves) and pure, so they are safe to call from any thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as sps

from .errors import DomainError, ShapeError

__all__ = [
    "DirichletParams",
    "lgamma",
    "digamma",
    "kl_dirichlet_vs_uniform",
    "kl_dirichlet_pair",
]


@dataclass(frozen=True)
class DirichletParams:
    """Concentration parameters of a Dirichlet over K class-probability vectors."""

    alpha: np.ndarray
    K: int = field(init=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim != 1:
            raise ShapeError(f"alpha must be a vector, got shape {alpha.shape}")
        if alpha.size < 2:
            raise DomainError("a Dirichlet needs at least K=2 classes")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
            raise DomainError("all concentration parameters must be finite and > 0")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "K", int(alpha.size))

    @property
    def strength(self) -> float:
        """Dirichlet strength: the sum of the concentration parameters."""
        return float(self.alpha.sum())


def _check_positive_scalar(x, name: str) -> float:
    x = float(x)
    if not math.isfinite(x) or x <= 0.0:
        raise DomainError(f"{name} requires a finite argument > 0, got {x!r}")
    return x


def lgamma(x: float) -> float:
    """Natural log of the gamma function for x > 0."""
    return float(sps.gammaln(_check_positive_scalar(x, "lgamma")))


def digamma(x: float) -> float:
    """Logarithmic derivative of the gamma function for x > 0."""
    return float(sps.psi(_check_positive_scalar(x, "digamma")))


def _as_params(d) -> DirichletParams:
    if isinstance(d, DirichletParams):
        return d
    return DirichletParams(np.asarray(d, dtype=float))


def kl_dirichlet_vs_uniform(d) -> float:
    """KL divergence from Dir(alpha) to the flat Dirichlet with all ones.

    Closed form:
        ln G(S) - ln G(K) - sum_k ln G(a_k)
        + sum_k (a_k - 1) * (psi(a_k) - psi(S))
    with S = sum_k a_k.  Zero exactly when every a_k = 1.
    """
    d = _as_params(d)
    a = d.alpha
    s = a.sum()
    kl = (
        sps.gammaln(s)
        - sps.gammaln(d.K)
        - sps.gammaln(a).sum()
        + float(((a - 1.0) * (sps.psi(a) - sps.psi(s))).sum())
    )
    # The closed form is >= 0 analytically; clamp the rounding dust at zero.
    return max(float(kl), 0.0)


def kl_dirichlet_pair(p, q) -> float:
    """KL divergence KL[Dir(p) || Dir(q)] between two Dirichlets of equal K.

    Closed form:
        ln G(S_p) - sum_k ln G(p_k) - ln G(S_q) + sum_k ln G(q_k)
        + sum_k (p_k - q_k) * (psi(p_k) - psi(S_p))
    """
    p = _as_params(p)
    q = _as_params(q)
    if p.K != q.K:
        raise ShapeError(f"dimension mismatch: K={p.K} vs K={q.K}")
    pa, qa = p.alpha, q.alpha
    if np.array_equal(pa, qa):
        return 0.0
    sp_, sq_ = pa.sum(), qa.sum()
    kl = (
        sps.gammaln(sp_)
        - sps.gammaln(pa).sum()
        - sps.gammaln(sq_)
        + sps.gammaln(qa).sum()
        + float(((pa - qa) * (sps.psi(pa) - sps.psi(sp_))).sum())
    )
    return max(float(kl), 0.0)
