"""Out-of-distribution sample providers for the contrastive loss heads.

Two kinds of provider are supported:

* **dataset** — draw samples from a second, real dataset (for example,
  handwritten letters as the out-distribution for a digit classifier).
  Draws cycle through seeded permutations so no sample repeats within
  one full pass over the source.
* **latent_perturbation** — train a small deterministic autoencoder on
  the in-distribution features, then produce out-of-distribution points
  by perturbing encodings with isotropic Gaussian noise and decoding:
  ``x_ood = decode(encode(x) + eps)`` with ``eps ~ N(0, sigma^2 I)``.
  Points generated this way live near, but off, the learned data
  manifold; with a narrow bottleneck they interpolate between clusters.

Reconstruction quality is validated on a held-out slice of the training
features; a provider whose autoencoder cannot reconstruct in-distribution
data has no meaningful "neighbourhood" to perturb, so that condition is
an error rather than a warning.

Throughout, "MSE" means the mean of squared errors over all samples
*and* feature entries (``np.mean((x - xhat) ** 2)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import diff_engine as de
from .data_io import DatasetBundle
from .errors import (
    ConfigError,
    DomainError,
    OodModelError,
    ShapeError,
    TrainingDivergedError,
)
from .nn_core import OptimiserState, adamw_step

__all__ = [
    "AutoencoderConfig",
    "AutoencoderModel",
    "OodProviderSpec",
    "DatasetOodProvider",
    "LatentOodProvider",
    "train_autoencoder",
    "init_autoencoder",
    "encode",
    "decode",
    "generate_ood",
    "dataset_ood_batch",
    "make_provider",
]

PROVIDER_KINDS = ("dataset", "latent_perturbation")


@dataclass(frozen=True)
class OodProviderSpec:
    """Declarative description of where out-of-distribution samples come from.

    ``kind="dataset"`` requires ``dataset_ref``; ``sigma`` and
    ``latent_dim`` only affect the ``latent_perturbation`` kind.
    """

    kind: str
    dataset_ref: Optional[DatasetBundle] = None
    sigma: float = 1.0
    latent_dim: int = 8

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ConfigError(
                "kind", f"must be one of {PROVIDER_KINDS}, got {self.kind!r}"
            )
        if self.kind == "dataset" and self.dataset_ref is None:
            raise ConfigError("dataset_ref", "required when kind='dataset'")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError("sigma", f"must be finite and > 0, got {self.sigma}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim", f"must be >= 1, got {self.latent_dim}")


@dataclass(frozen=True)
class AutoencoderConfig:
    """Training settings for the latent-perturbation autoencoder."""

    epochs: int = 200
    hidden_dims: Tuple[int, ...] = (32,)
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    mse_threshold: float = 0.05

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(
                "hidden_dims", f"must be nonempty positive ints, got {self.hidden_dims}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(
                "learning_rate", f"must be finite and > 0, got {self.learning_rate}"
            )
        if self.weight_decay < 0:
            raise ConfigError(
                "weight_decay", f"must be >= 0, got {self.weight_decay}"
            )
        if not (0 < self.val_fraction < 1):
            raise ConfigError(
                "val_fraction", f"must lie in (0, 1), got {self.val_fraction}"
            )
        if not (np.isfinite(self.mse_threshold) and self.mse_threshold > 0):
            raise ConfigError(
                "mse_threshold", f"must be finite and > 0, got {self.mse_threshold}"
            )


@dataclass(frozen=True)
class AutoencoderModel:
    """Trained encoder/decoder parameter sets plus their dimensions.

    Latent coordinates are exposed in a standardized chart: raw encoder
    outputs are shifted by ``latent_offset`` and divided by
    ``latent_scale`` (their mean and spread over the fit data), so a unit
    of sigma is a unit of latent spread. ``decode`` inverts the same
    affine map before the decoder network, so ``decode(encode(x))`` is
    the plain reconstruction regardless of the chart.
    """

    encoder: de.ParamSet
    decoder: de.ParamSet
    input_dim: int
    latent_dim: int
    hidden_dims: Tuple[int, ...]
    val_mse: float
    latent_offset: np.ndarray
    latent_scale: np.ndarray


def _layer_names(prefix: str, n_layers: int):
    return [(f"{prefix}_w{i}", f"{prefix}_b{i}") for i in range(1, n_layers + 1)]


def _init_mlp(prefix: str, dims, rng) -> dict:
    params = {}
    for i, (w_name, b_name) in enumerate(_layer_names(prefix, len(dims) - 1)):
        fan_in = dims[i]
        # tanh hidden layers and linear outputs: unit-variance-preserving scale
        params[w_name] = rng.normal(
            0.0, np.sqrt(1.0 / fan_in), size=(dims[i], dims[i + 1])
        )
        params[b_name] = np.zeros(dims[i + 1])
    return params


def _mlp_forward(params, prefix: str, dims, x):
    lifted = isinstance(x, de.Var) or any(
        isinstance(params[w], de.Var) for w, _ in _layer_names(prefix, len(dims) - 1)
    )
    h = x
    names = _layer_names(prefix, len(dims) - 1)
    for i, (w_name, b_name) in enumerate(names):
        h = h @ params[w_name] + params[b_name]
        if i < len(names) - 1:
            h = de.tanh(h) if lifted else np.tanh(h)
    return h


def _encoder_dims(input_dim, hidden_dims, latent_dim):
    return (input_dim, *hidden_dims, latent_dim)


def _decoder_dims(input_dim, hidden_dims, latent_dim):
    return (latent_dim, *reversed(hidden_dims), input_dim)


def init_autoencoder(
    input_dim: int, latent_dim: int, config: AutoencoderConfig, seed: int
) -> Tuple[de.ParamSet, de.ParamSet]:
    """Seeded initial encoder/decoder parameters (before any training)."""
    if input_dim < 1:
        raise ConfigError("input_dim", f"must be >= 1, got {input_dim}")
    if latent_dim < 1:
        raise ConfigError("latent_dim", f"must be >= 1, got {latent_dim}")
    rng = np.random.default_rng(seed)
    enc = _init_mlp("enc", _encoder_dims(input_dim, config.hidden_dims, latent_dim), rng)
    dec = _init_mlp("dec", _decoder_dims(input_dim, config.hidden_dims, latent_dim), rng)
    return de.ParamSet(enc), de.ParamSet(dec)


def encode(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    """Map input rows to standardized latent coordinates."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected batch of shape (n, {model.input_dim}), got {x.shape}"
        )
    dims = _encoder_dims(model.input_dim, model.hidden_dims, model.latent_dim)
    raw = _mlp_forward(model.encoder, "enc", dims, x)
    return (raw - model.latent_offset) / model.latent_scale


def decode(model: AutoencoderModel, z: np.ndarray) -> np.ndarray:
    """Map standardized latent coordinates back to input space."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ShapeError(
            f"expected latent batch of shape (n, {model.latent_dim}), got {z.shape}"
        )
    dims = _decoder_dims(model.input_dim, model.hidden_dims, model.latent_dim)
    return _mlp_forward(model.decoder, "dec", dims, z * model.latent_scale + model.latent_offset)


def train_autoencoder(
    features: np.ndarray,
    latent_dim: int,
    seed: int,
    config: AutoencoderConfig = AutoencoderConfig(),
) -> AutoencoderModel:
    """Fit a deterministic autoencoder to in-distribution features.

    The final ``val_fraction`` slice of a seeded shuffle is held out; its
    reconstruction MSE must come in at or below ``config.mse_threshold``
    or the model is rejected with :class:`OodModelError` (a provider that
    cannot reconstruct the data has no usable latent neighbourhood).
    With ``epochs=0`` the seeded initial parameters are returned as-is
    and the threshold is not enforced.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DomainError(
            f"features must be a nonempty 2-D array, got shape {features.shape}"
        )
    if not np.all(np.isfinite(features)):
        raise DomainError("features contain non-finite values")
    n, d = features.shape
    enc, dec = init_autoencoder(d, latent_dim, config, seed)

    n_val = max(1, int(round(n * config.val_fraction))) if n > 1 else 0
    order = np.random.default_rng([seed, 1]).permutation(n)
    fit_idx, val_idx = order[: n - n_val], order[n - n_val :]
    x_fit, x_val = features[fit_idx], features[val_idx]

    params = de.ParamSet({**dict(enc), **dict(dec)})
    enc_dims = _encoder_dims(d, config.hidden_dims, latent_dim)
    dec_dims = _decoder_dims(d, config.hidden_dims, latent_dim)
    opt = OptimiserState.fresh(
        params,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    shuffle_rng = np.random.default_rng([seed, 2])
    for epoch in range(config.epochs):
        epoch_order = shuffle_rng.permutation(len(x_fit))
        for start in range(0, len(x_fit), config.batch_size):
            xb = x_fit[epoch_order[start : start + config.batch_size]]

            def loss_fn(p, xb=xb):
                z = _mlp_forward(p, "enc", enc_dims, xb)
                xhat = _mlp_forward(p, "dec", dec_dims, z)
                diff = xhat - xb
                return de.vmean(diff * diff)

            try:
                _, grads = de.value_and_grad(loss_fn, params)
                params, opt = adamw_step(params, grads, opt)
            except (de.EvaluationError, DomainError) as err:
                raise TrainingDivergedError(epoch, str(err)) from err

    enc_names = {w for pair in _layer_names("enc", len(enc_dims) - 1) for w in pair}
    enc_out = de.ParamSet({k: v for k, v in params.items() if k in enc_names})
    dec_out = de.ParamSet({k: v for k, v in params.items() if k not in enc_names})
    raw_latents = _mlp_forward(enc_out, "enc", enc_dims, x_fit)
    scale = raw_latents.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)

    def build(val_mse):
        return AutoencoderModel(
            encoder=enc_out,
            decoder=dec_out,
            input_dim=d,
            latent_dim=latent_dim,
            hidden_dims=config.hidden_dims,
            val_mse=val_mse,
            latent_offset=raw_latents.mean(axis=0),
            latent_scale=scale,
        )

    model = build(float("nan"))
    if len(x_val) > 0:
        val_mse = float(np.mean((decode(model, encode(model, x_val)) - x_val) ** 2))
        model = build(val_mse)
        if config.epochs > 0 and val_mse > config.mse_threshold:
            raise OodModelError(
                f"held-out reconstruction MSE {val_mse:.6f} exceeds "
                f"threshold {config.mse_threshold:.6f}"
            )
    return model


def generate_ood(
    model: AutoencoderModel, batch: np.ndarray, sigma: float, seed
) -> np.ndarray:
    """Perturb encodings with N(0, sigma^2 I) noise and decode.

    ``sigma=0`` returns the plain reconstruction. Output shape equals
    the input batch shape.
    """
    if not (np.isfinite(sigma) and sigma >= 0):
        raise DomainError(f"sigma must be finite and >= 0, got {sigma}")
    z = encode(model, batch)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        z = z + sigma * rng.standard_normal(z.shape)
    return decode(model, z)


def _cycled_indices(size: int, n: int, rng) -> np.ndarray:
    """Concatenate seeded permutations until n indices are collected.

    Each full pass is one permutation, so within a cycle no index repeats.
    """
    if size < 1:
        raise DomainError("cannot draw from an empty dataset")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    chunks, got = [], 0
    while got < n:
        chunks.append(rng.permutation(size))
        got += size
    return np.concatenate(chunks)[:n]


def dataset_ood_batch(
    provider: OodProviderSpec, n: int, seed, expected_dim: Optional[int] = None
) -> np.ndarray:
    """Draw n feature rows from the provider's reference dataset.

    Rows are drawn without replacement per cycle: a seeded permutation is
    consumed in full before the next reshuffle, so requesting more rows
    than the dataset holds repeats no row within one pass.
    """
    if provider.kind != "dataset":
        raise ConfigError("kind", f"dataset_ood_batch requires kind='dataset', got {provider.kind!r}")
    if n < 0:
        raise DomainError(f"n must be >= 0, got {n}")
    features = provider.dataset_ref.features
    if expected_dim is not None and features.shape[1] != expected_dim:
        raise ShapeError(
            f"out-of-distribution features have width {features.shape[1]}, "
            f"expected {expected_dim}"
        )
    idx = _cycled_indices(features.shape[0], n, np.random.default_rng(seed))
    return features[idx]


class DatasetOodProvider:
    """Trainer-facing wrapper: seeded draws from a fixed reference dataset."""

    def __init__(self, bundle: DatasetBundle, expected_dim: Optional[int] = None):
        if expected_dim is not None and bundle.d != expected_dim:
            raise ShapeError(
                f"out-of-distribution features have width {bundle.d}, "
                f"expected {expected_dim}"
            )
        self._spec = OodProviderSpec(kind="dataset", dataset_ref=bundle)

    def draw(self, n: int, seed) -> np.ndarray:
        return dataset_ood_batch(self._spec, n, seed)


class LatentOodProvider:
    """Trainer-facing wrapper: latent-perturbation draws from a trained model.

    Each draw picks source rows by seeded permutation cycles and perturbs
    their encodings with the same seed stream, so a (model, features,
    sigma, seed) tuple always yields the same batch.
    """

    def __init__(
        self, model: AutoencoderModel, source_features: np.ndarray, sigma: float = 1.0
    ):
        if not (np.isfinite(sigma) and sigma > 0):
            raise ConfigError("sigma", f"must be finite and > 0, got {sigma}")
        source_features = np.asarray(source_features, dtype=np.float64)
        if source_features.ndim != 2 or source_features.shape[0] == 0:
            raise DomainError("source_features must be a nonempty 2-D array")
        if source_features.shape[1] != model.input_dim:
            raise ShapeError(
                f"source features have width {source_features.shape[1]}, "
                f"model expects {model.input_dim}"
            )
        self._model = model
        self._source = source_features
        self._sigma = sigma

    def draw(self, n: int, seed) -> np.ndarray:
        if n < 0:
            raise DomainError(f"n must be >= 0, got {n}")
        rng = np.random.default_rng(seed)
        idx = _cycled_indices(self._source.shape[0], n, rng)
        batch = self._source[idx]
        z = encode(self._model, batch)
        z = z + self._sigma * rng.standard_normal(z.shape)
        return decode(self._model, z)


def make_provider(
    spec: OodProviderSpec,
    in_dist: DatasetBundle,
    seed: int,
    ae_config: AutoencoderConfig = AutoencoderConfig(),
):
    """Build the provider a trainer consumes from its declarative spec.

    ``dataset`` providers check feature-width compatibility against the
    in-distribution bundle; ``latent_perturbation`` providers train their
    autoencoder on the in-distribution features here.
    """
    if spec.kind == "dataset":
        return DatasetOodProvider(spec.dataset_ref, expected_dim=in_dist.d)
    model = train_autoencoder(in_dist.features, spec.latent_dim, seed, ae_config)
    return LatentOodProvider(model, in_dist.features, sigma=spec.sigma)
