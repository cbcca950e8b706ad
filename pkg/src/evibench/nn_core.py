"""Trainable MLP backbone with evidence/logit heads and an AdamW loop.

The same forward graph runs in two modes: plain numpy arrays for fast
inference, or `Var` nodes when gradients are needed.  Loss heads plug in by
name (edl, dpn, edlgen); DPN and the contrastive head additionally pull
negative samples from an OOD provider object exposing ``draw(n, seed)``.

Optimiser steps are pure functions: identical (params, grads, state) in,
identical (params, state) out, no mutation anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diff_engine as de
from .data_io import one_hot
from .errors import (
    ConfigError,
    DomainError,
    EvaluationError,
    ShapeError,
    TrainingDivergedError,
)
from .loss_dpn import DpnConfig, dpn_loss_batch, dpn_targets
from .loss_edl import EdlConfig, edl_loss_batch
from .loss_edlgen import (
    EdlGenConfig,
    bernoulli_contrastive_loss,
    beta_coefficient,
    evidence_from_logits,
    misclassification_regularizer,
)

__all__ = [
    "EXP_CLAMP",
    "LOSS_HEADS",
    "ModelSpec",
    "OptimiserState",
    "TrainConfig",
    "EpochMetrics",
    "init_model",
    "forward",
    "predict_alpha",
    "accuracy",
    "adamw_step",
    "train_model",
]

EXP_CLAMP = 10.0

_ACTIVATIONS = ("relu", "tanh")
_OUTPUT_MODES = (
    "evidence_softplus",
    "evidence_relu",
    "evidence_exp_clamped",
    "raw_logits",
)
LOSS_HEADS = ("edl", "dpn", "edlgen")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: layer widths plus head behaviour."""

    input_dim: int
    hidden_dims: tuple
    K: int
    hidden_activation: str = "relu"
    output_mode: str = "evidence_softplus"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim", "must be >= 1")
        dims = tuple(int(d) for d in self.hidden_dims)
        if not dims or any(d < 1 for d in dims):
            raise ConfigError("hidden_dims", "must be a non-empty list of widths >= 1")
        if self.K < 2:
            raise ConfigError("K", "must be >= 2")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ConfigError("hidden_activation", f"must be one of {_ACTIVATIONS}")
        if self.output_mode not in _OUTPUT_MODES:
            raise ConfigError("output_mode", f"must be one of {_OUTPUT_MODES}")
        object.__setattr__(self, "hidden_dims", dims)

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.K)


@dataclass(frozen=True)
class OptimiserState:
    """AdamW hyperparameters plus per-parameter moment estimates."""

    m: de.ParamSet
    v: de.ParamSet
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate", "must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1/beta2", "must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ConfigError("eps", "must be > 0")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.step_count < 0:
            raise ConfigError("step_count", "must be >= 0")
        if self.m.shapes() != self.v.shapes():
            raise ShapeError("moment arrays disagree in shape")

    @classmethod
    def fresh(cls, params: de.ParamSet, **kwargs) -> "OptimiserState":
        zeros = de.ParamSet({n: np.zeros_like(a) for n, a in params.items()})
        return cls(m=zeros, v=zeros, **kwargs)


@dataclass(frozen=True)
class TrainConfig:
    """Loop hyperparameters plus the loss head's own settings."""

    epochs: int
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    head_config: object = None
    ood_provider: object = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay", "must be >= 0")


@dataclass(frozen=True)
class EpochMetrics:
    """One training epoch: mean minibatch loss and held-out accuracy."""

    epoch: int
    train_loss: float
    test_accuracy: float


def init_model(spec: ModelSpec, seed: int) -> de.ParamSet:
    """Fan-in-scaled normal weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    arrays = {}
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        gain = 1.0 if (last or spec.hidden_activation == "tanh") else 2.0
        std = np.sqrt(gain / fan_in)
        arrays[f"w{i + 1}"] = rng.normal(0.0, std, size=(fan_in, fan_out))
        arrays[f"b{i + 1}"] = np.zeros(fan_out)
    return de.ParamSet(arrays)


def _np_softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def forward(spec: ModelSpec, params, batch):
    """Evidence or logits for a batch, shape n x K.

    `params` may hold numpy arrays (plain inference) or `Var` nodes (a
    recorded graph); the return type follows the parameters.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(
            f"batch must be n x {spec.input_dim}, got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise DomainError("batch contains non-finite entries")
    lifted = isinstance(params[next(iter(params))], de.Var)
    n_layers = len(spec.layer_dims) - 1
    h = x
    for i in range(1, n_layers):
        z = h @ params[f"w{i}"] + params[f"b{i}"]
        if spec.hidden_activation == "relu":
            h = de.relu(z) if lifted else np.maximum(z, 0.0)
        else:
            h = de.tanh(z) if lifted else np.tanh(z)
    z = h @ params[f"w{n_layers}"] + params[f"b{n_layers}"]
    if spec.output_mode == "raw_logits":
        return z
    if spec.output_mode == "evidence_softplus":
        return de.softplus(z) if lifted else _np_softplus(z)
    if spec.output_mode == "evidence_relu":
        return de.relu(z) if lifted else np.maximum(z, 0.0)
    # evidence_exp_clamped: cap pre-exponential logits, then exponentiate.
    if lifted:
        return de.exp(de.clip_max(z, EXP_CLAMP))
    return np.exp(np.minimum(z, EXP_CLAMP))


def predict_alpha(
    spec: ModelSpec, params: de.ParamSet, batch, logit_clamp: float = EXP_CLAMP
) -> np.ndarray:
    """Dirichlet concentrations for a batch on the fast numpy path."""
    out = forward(spec, params, batch)
    if spec.output_mode == "raw_logits":
        return np.exp(np.minimum(out, logit_clamp)) + 1.0
    return out + 1.0


def accuracy(spec: ModelSpec, params: de.ParamSet, bundle) -> float:
    """Fraction of bundle samples whose argmax alpha matches the label."""
    alpha = predict_alpha(spec, params, bundle.features)
    return float((np.argmax(alpha, axis=1) == bundle.labels).mean())


def adamw_step(params: de.ParamSet, grads: de.ParamSet, opt: OptimiserState):
    """One decoupled-weight-decay Adam update; returns (params, state).

    Weight decay multiplies parameters by (1 - lr * wd) before the
    bias-corrected moment step is applied.
    """
    if params.shapes() != grads.shapes():
        raise ShapeError("gradient shapes do not match parameters")
    if params.shapes() != opt.m.shapes():
        raise ShapeError("optimiser moments do not match parameters")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient for '{name}'; step rejected")
    t = opt.step_count + 1
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        p_decayed = p * (1.0 - opt.learning_rate * opt.weight_decay)
        step = opt.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        new_p[name] = p_decayed - step
        new_m[name] = m
        new_v[name] = v
    return (
        de.ParamSet(new_p),
        replace(opt, m=de.ParamSet(new_m), v=de.ParamSet(new_v), step_count=t),
    )


def _resolve_head_config(spec: ModelSpec, loss_head: str, hyper: TrainConfig):
    if loss_head not in LOSS_HEADS:
        raise ConfigError("loss_head", f"must be one of {LOSS_HEADS}")
    if loss_head == "edlgen":
        if spec.output_mode != "raw_logits":
            raise ConfigError(
                "output_mode", "edlgen interprets outputs as log density ratios; use raw_logits"
            )
    elif spec.output_mode == "raw_logits":
        raise ConfigError(
            "output_mode", f"{loss_head} needs a non-negative evidence head"
        )
    cfg = hyper.head_config
    if loss_head == "edl":
        if cfg is None:
            cfg = EdlConfig(annealing_step=10, K=spec.K)
        if not isinstance(cfg, EdlConfig):
            raise ConfigError("head_config", "edl expects an EdlConfig")
        if cfg.K != spec.K:
            raise ConfigError("head_config", f"EdlConfig.K={cfg.K} but model K={spec.K}")
    elif loss_head == "dpn":
        cfg = cfg if cfg is not None else DpnConfig()
        if not isinstance(cfg, DpnConfig):
            raise ConfigError("head_config", "dpn expects a DpnConfig")
        if hyper.ood_provider is None:
            raise ConfigError("ood_provider", "dpn training needs an OOD provider")
    else:
        cfg = cfg if cfg is not None else EdlGenConfig()
        if not isinstance(cfg, EdlGenConfig):
            raise ConfigError("head_config", "edlgen expects an EdlGenConfig")
        if hyper.ood_provider is None:
            raise ConfigError("ood_provider", "edlgen training needs an OOD provider")
    return cfg


def train_model(
    spec: ModelSpec,
    train_data,
    test_data,
    loss_head: str,
    hyper: TrainConfig,
    seed: int,
):
    """Minibatch-train a model under the named loss head.

    Returns (final ParamSet, list of EpochMetrics).  Deterministic for a
    fixed (seed, config); batch order comes from a seeded stream that is
    reshuffled every epoch.  A non-finite loss or gradient aborts with
    TrainingDivergedError carrying the epoch index.
    """
    head_cfg = _resolve_head_config(spec, loss_head, hyper)
    if train_data.d != spec.input_dim or test_data.d != spec.input_dim:
        raise ShapeError("dataset width does not match model input_dim")
    if train_data.K != spec.K:
        raise ConfigError("K", f"dataset has K={train_data.K}, model K={spec.K}")

    params = init_model(spec, seed)
    opt = OptimiserState.fresh(
        params,
        learning_rate=hyper.learning_rate,
        weight_decay=hyper.weight_decay,
    )
    shuffle_rng = np.random.default_rng([seed, 1])
    y_onehot = one_hot(train_data.labels, spec.K)
    n = train_data.n
    metrics: list[EpochMetrics] = []

    if loss_head == "dpn":
        # Freeze the two distinct target values once; rows are permutations.
        proto = dpn_targets(0, spec.K, head_cfg)
        sharp_val, off_val = proto.alpha[0], proto.alpha[1]

    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, hyper.batch_size)):
            idx = order[start : start + hyper.batch_size]
            xb = train_data.features[idx]
            yb = y_onehot[idx]
            b = len(idx)

            if loss_head == "edl":
                def loss_fn(p, xb=xb, yb=yb):
                    return edl_loss_batch(forward(spec, p, xb), yb, epoch, head_cfg)
            elif loss_head == "dpn":
                x_ood = hyper.ood_provider.draw(b, [seed, 2, epoch, step])
                targets = np.full((b + len(x_ood), spec.K), off_val)
                targets[np.arange(b), train_data.labels[idx]] = sharp_val
                targets[b:] = 1.0
                x_all = np.vstack([xb, x_ood])

                def loss_fn(p, x_all=x_all, targets=targets):
                    alpha = forward(spec, p, x_all) + 1.0
                    return dpn_loss_batch(alpha, targets, head_cfg)
            else:
                n_ood = max(1, int(round(b * head_cfg.ood_batch_ratio)))
                x_ood = hyper.ood_provider.draw(n_ood, [seed, 2, epoch, step])
                beta_t = beta_coefficient(epoch, head_cfg)

                def loss_fn(p, xb=xb, yb=yb, x_ood=x_ood, beta_t=beta_t):
                    z_in = forward(spec, p, xb)
                    z_ood = forward(spec, p, x_ood)
                    loss = bernoulli_contrastive_loss(z_in, yb, z_ood)
                    if beta_t > 0.0 and spec.K > 2:
                        alpha = evidence_from_logits(z_in, head_cfg) + 1.0
                        loss = loss + misclassification_regularizer(alpha, yb, beta_t)
                    return loss

            try:
                loss_val, grads = de.value_and_grad(loss_fn, params)
                params, opt = adamw_step(params, grads, opt)
            except (EvaluationError, DomainError) as err:
                raise TrainingDivergedError(epoch, str(err)) from err
            losses.append(loss_val)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                test_accuracy=accuracy(spec, params, test_data),
            )
        )
    return params, metrics
