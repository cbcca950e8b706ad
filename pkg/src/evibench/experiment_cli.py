"""Command-line workbench tying training, OOD sources, and analysis together.

Three subcommands turn JSON experiment configs into file artifacts:

``evibench train <config.json> [--out DIR]``
    Trains one model and writes, into the output directory:

    - ``checkpoint.npz`` — NumPy archive holding every parameter array
      under its own name (``w1``, ``b1``, ...), plus ``format_version``
      (currently 1) and ``config_json`` (the full resolved config as a
      JSON string). ``load_checkpoint`` rebuilds the model from it.
    - ``metrics.csv`` — one row per epoch: ``epoch,train_loss,test_acc``.
    - ``evidence.csv`` — one row per test sample:
      ``sample_id,y_true,y_pred,e_1,...,e_K`` (raw per-class evidence,
      so any derived statistic stays replayable).

``evibench analyze <evidence.csv> [--probe-seed N] [--out DIR]``
    Reads an evidence dump (class count inferred from the header) and
    writes ``cdf.csv`` (per-class strength CDFs), ``probe_report.csv``
    (1-D separability probes; skipped with an explanatory comment when
    some class has too few rows to stratify), and ``summary.json``
    (accuracy, per-class recall, per-class mean uncertainty).
    Re-running on the same dump produces identical bytes.

``evibench sweep <config.json> --grid SPEC [--out DIR]``
    Trains one run per grid point and writes per-run artifacts under
    ``<out>/<run-id>/``, plus ``sweep_table.csv`` (one row per run and
    class: ``run,seed,annealing_step,class,recall,mean_u``) and
    ``correlations.json`` (pooled Pearson/Spearman of recall against
    mean uncertainty, per loss kind). The grid spec is
    ``axis=v1,v2,...`` pairs joined by ``;`` over the axes ``seeds``,
    ``annealing_steps``, and ``losses``, e.g.
    ``seeds=0,1,2,3,4;annealing_steps=10,20`` or
    ``losses=edl,dpn,edlgen;seeds=0,1``. A failing run does not stop
    the sweep: its table rows are marked with ``nan`` and the exit code
    becomes 4. When no ``seeds`` axis is given, each run's seed is
    derived deterministically from ``(base seed, run index)`` and
    recorded in the run's own artifacts, so every run is reproducible
    standalone and results do not depend on scheduling order.

Exit codes: 0 success; 2 invalid config or malformed input (message
names the offending field or line); 3 training diverged; 4 sweep
finished but some runs failed.

Config schema (JSON object; unknown keys are rejected)::

    {
      "dataset":  {"kind": "digits", "n_train": 10000, "n_test": 10000,
                   "seed": 7}
                | {"kind": "idx", "train_images": PATH, "train_labels": PATH,
                   "test_images": PATH, "test_labels": PATH}
                | {"kind": "mixture", "K": 2, "means": [[...], ...],
                   "stddev": 1.0 | [...], "samples_per_class": 500,
                   "seed": 0, "test_fraction": 0.5},
      "model":    {"hidden_dims": [500, 500], "hidden_activation": "relu"},
      "loss":     {"kind": "edl", "annealing_step": 10}
                | {"kind": "dpn", "epsilon": 0.01, "target_strength": 100.0,
                   "ood_weight": 1.0}
                | {"kind": "edlgen", "beta_mode": "constant", "beta_value": 1.0,
                   "logit_clamp": 10.0, "ood_batch_ratio": 1.0,
                   "annealing_step": 10},
      "ood":      {"kind": "letters", "n": 6800, "seed": 8}
                | {"kind": "idx", "images": PATH, "labels": PATH}
                | {"kind": "latent_perturbation", "sigma": 1.0,
                   "latent_dim": 8, "seed": 11, "autoencoder": {...}}
                | {"dpn": <ood spec>, "edlgen": <ood spec>},
      "seed": 0, "epochs": 50, "batch_size": 64,
      "learning_rate": 0.001, "weight_decay": 0.0001,
      "out_dir": "runs/example"
    }

``ood`` is required for (and only valid with) the ``dpn`` and
``edlgen`` loss kinds; the keyed form supplies one source per loss
kind for mixed-loss sweeps. When ``model.hidden_dims`` is omitted it
defaults to ``[500, 500]`` for image datasets and ``[64, 64]`` for
synthetic mixtures. The optional ``autoencoder`` block accepts
``epochs``, ``hidden_dims``, ``batch_size``, ``learning_rate``,
``weight_decay``, ``val_fraction``, and ``mse_threshold``.

Every artifact embeds the resolved config: CSVs carry it in a leading
``# config: ...`` comment line, JSON files under a ``config`` key, and
checkpoints in ``config_json``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import diff_engine as de
from .analysis import (
    EvidenceRecord,
    class_cdf,
    correlation,
    dirichlet_stats,
    per_class_mean_u,
    per_class_recall,
    probe_separability,
    records_from_alpha,
    run_record_from_records,
    write_cdf_csv,
    write_probe_csv,
    write_sweep_csv,
    SweepRow,
)
from .data_io import DatasetBundle, MixtureSpec, read_idx, split_dataset, synth_mixture
from .errors import (
    ConfigError,
    DomainError,
    DumpFormatError,
    IdxFormatError,
    OodModelError,
    ShapeError,
    StratificationError,
    TrainingDivergedError,
    UndefinedCorrelationError,
)
from .glyphs import load_digit_splits, load_letter_pool
from .loss_dpn import DpnConfig
from .loss_edl import EdlConfig
from .loss_edlgen import EdlGenConfig
from .nn_core import ModelSpec, TrainConfig, predict_alpha, train_model
from .ood_source import (
    AutoencoderConfig,
    DatasetOodProvider,
    LatentOodProvider,
    train_autoencoder,
)

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "EXIT_PARTIAL",
    "CHECKPOINT_VERSION",
    "load_checkpoint",
    "read_evidence_dump",
    "cmd_train",
    "cmd_analyze",
    "cmd_sweep",
    "main",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_PARTIAL = 4

CHECKPOINT_VERSION = 1

LOSS_KINDS = ("edl", "dpn", "edlgen")

# Per-section allowed keys; anything else is a config error so typos
# fail loudly instead of silently falling back to defaults.
_TOP_KEYS = {
    "dataset",
    "model",
    "loss",
    "ood",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "out_dir",
}
_DATASET_KEYS = {
    "digits": {"kind", "n_train", "n_test", "seed"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels"},
    "mixture": {"kind", "K", "means", "stddev", "samples_per_class", "seed", "test_fraction"},
}
_MODEL_KEYS = {"hidden_dims", "hidden_activation"}
_LOSS_KEYS = {
    "edl": {"kind", "annealing_step"},
    "dpn": {"kind", "epsilon", "target_strength", "ood_weight"},
    "edlgen": {
        "kind",
        "beta_mode",
        "beta_value",
        "logit_clamp",
        "ood_batch_ratio",
        "annealing_step",
    },
}
_OOD_KEYS = {
    "letters": {"kind", "n", "seed"},
    "idx": {"kind", "images", "labels"},
    "latent_perturbation": {"kind", "sigma", "latent_dim", "seed", "autoencoder"},
}
_AE_KEYS = {
    "epochs",
    "hidden_dims",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "val_fraction",
    "mse_threshold",
}


# ---------------------------------------------------------------------------
# config loading and resolution


def _require_mapping(obj, field):
    if not isinstance(obj, dict):
        raise ConfigError(field, f"must be an object, got {type(obj).__name__}")
    return obj


def _nest(err: ConfigError, section: str) -> ConfigError:
    """Re-raise a ConfigError with its field prefixed by the section name."""
    prefix = f"config field '{err.field}': "
    message = str(err)
    detail = message[len(prefix):] if message.startswith(prefix) else message
    return ConfigError(f"{section}.{err.field}", detail)


def _check_keys(section: dict, allowed, field):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(field, f"unknown keys {unknown} (allowed: {sorted(allowed)})")


def _get_number(section, key, field, default=None, minimum=None, integer=False):
    value = section.get(key, default)
    if value is None:
        raise ConfigError(f"{field}.{key}", "is required")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field}.{key}", f"must be a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{field}.{key}", f"must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{field}.{key}", f"must be >= {minimum}, got {value!r}")
    return int(value) if integer else float(value)


def load_config_file(path) -> dict:
    """Parse a JSON config file; not-a-file and bad JSON are config errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"{path} is not a readable file")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"{path} is not valid JSON (line {err.lineno}: {err.msg})")
    return _require_mapping(raw, "config")


def _resolve_dataset(cfg: dict):
    section = _require_mapping(cfg.get("dataset"), "dataset")
    kind = section.get("kind")
    if kind not in _DATASET_KEYS:
        raise ConfigError("dataset.kind", f"must be one of {sorted(_DATASET_KEYS)}, got {kind!r}")
    _check_keys(section, _DATASET_KEYS[kind], "dataset")
    if kind == "digits":
        resolved = {
            "kind": "digits",
            "n_train": _get_number(section, "n_train", "dataset", 10000, 1, integer=True),
            "n_test": _get_number(section, "n_test", "dataset", 10000, 1, integer=True),
            "seed": _get_number(section, "seed", "dataset", 7, 0, integer=True),
        }
        train, test = load_digit_splits(resolved["n_train"], resolved["n_test"], resolved["seed"])
        return resolved, train, test
    if kind == "idx":
        paths = {}
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            value = section.get(key)
            if not isinstance(value, str):
                raise ConfigError(f"dataset.{key}", "must be a file path string")
            if not Path(value).is_file():
                raise ConfigError(f"dataset.{key}", f"{value} is not a readable file")
            paths[key] = value
        try:
            train = read_idx(paths["train_images"], paths["train_labels"], "train")
            test = read_idx(paths["test_images"], paths["test_labels"], "test")
        except IdxFormatError as err:
            raise ConfigError("dataset", str(err))
        return {"kind": "idx", **paths}, train, test
    # mixture
    resolved = {
        "kind": "mixture",
        "K": _get_number(section, "K", "dataset", None, 2, integer=True),
        "means": section.get("means"),
        "stddev": section.get("stddev", 1.0),
        "samples_per_class": _get_number(
            section, "samples_per_class", "dataset", 500, 1, integer=True
        ),
        "seed": _get_number(section, "seed", "dataset", 0, 0, integer=True),
        "test_fraction": _get_number(section, "test_fraction", "dataset", 0.5),
    }
    if not 0.0 < resolved["test_fraction"] < 1.0:
        raise ConfigError("dataset.test_fraction", "must lie strictly between 0 and 1")
    try:
        spec = MixtureSpec(
            K=resolved["K"],
            means=resolved["means"],
            stddev=resolved["stddev"],
            samples_per_class=resolved["samples_per_class"],
            seed=resolved["seed"],
        )
        full = synth_mixture(spec)
        train, test = split_dataset(
            full, (1.0 - resolved["test_fraction"], resolved["test_fraction"]), resolved["seed"]
        )
    except (DomainError, ShapeError, TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError("dataset", str(err))
    resolved["means"] = np.asarray(resolved["means"], dtype=float).tolist()
    resolved["stddev"] = np.asarray(spec.stddev, dtype=float).tolist()
    return resolved, train, test


def _resolve_model(cfg: dict, input_dim: int, k: int, loss_kind: str, dataset_kind: str) -> tuple:
    section = _require_mapping(cfg.get("model", {}), "model")
    _check_keys(section, _MODEL_KEYS, "model")
    # Image datasets default to the wide two-layer backbone; the tiny
    # synthetic mixtures only need a fraction of that capacity.
    default_hidden = [64, 64] if dataset_kind == "mixture" else [500, 500]
    hidden = section.get("hidden_dims", default_hidden)
    if not isinstance(hidden, list) or not hidden:
        raise ConfigError("model.hidden_dims", "must be a non-empty list of widths")
    activation = section.get("hidden_activation", "relu")
    output_mode = "raw_logits" if loss_kind == "edlgen" else "evidence_softplus"
    try:
        spec = ModelSpec(
            input_dim=input_dim,
            hidden_dims=tuple(hidden),
            K=k,
            hidden_activation=activation,
            output_mode=output_mode,
        )
    except ConfigError as err:
        raise _nest(err, "model")
    resolved = {
        "hidden_dims": list(spec.hidden_dims),
        "hidden_activation": activation,
        "output_mode": output_mode,
    }
    return resolved, spec


def _resolve_loss(cfg: dict, k: int):
    section = _require_mapping(cfg.get("loss"), "loss")
    kind = section.get("kind")
    if kind not in LOSS_KINDS:
        raise ConfigError("loss.kind", f"must be one of {list(LOSS_KINDS)}, got {kind!r}")
    _check_keys(section, _LOSS_KEYS[kind], "loss")
    try:
        if kind == "edl":
            resolved = {
                "kind": "edl",
                "annealing_step": _get_number(section, "annealing_step", "loss", 10, 1, integer=True),
            }
            head = EdlConfig(annealing_step=resolved["annealing_step"], K=k)
        elif kind == "dpn":
            resolved = {
                "kind": "dpn",
                "epsilon": _get_number(section, "epsilon", "loss", 0.01),
                "target_strength": _get_number(section, "target_strength", "loss", 100.0),
                "ood_weight": _get_number(section, "ood_weight", "loss", 1.0),
            }
            head = DpnConfig(
                epsilon=resolved["epsilon"],
                target_strength=resolved["target_strength"],
                ood_weight=resolved["ood_weight"],
            )
        else:
            resolved = {
                "kind": "edlgen",
                "beta_mode": section.get("beta_mode", "constant"),
                "beta_value": _get_number(section, "beta_value", "loss", 1.0),
                "logit_clamp": _get_number(section, "logit_clamp", "loss", 10.0),
                "ood_batch_ratio": _get_number(section, "ood_batch_ratio", "loss", 1.0),
                "annealing_step": _get_number(section, "annealing_step", "loss", 10, 1, integer=True),
            }
            head = EdlGenConfig(**{key: resolved[key] for key in resolved if key != "kind"})
    except ConfigError as err:
        if err.field.startswith("loss."):
            raise
        raise _nest(err, "loss")
    return resolved, kind, head


def _ae_config(section: dict) -> AutoencoderConfig:
    _check_keys(section, _AE_KEYS, "ood.autoencoder")
    kwargs = dict(section)
    if "hidden_dims" in kwargs:
        if not isinstance(kwargs["hidden_dims"], list) or not kwargs["hidden_dims"]:
            raise ConfigError("ood.autoencoder.hidden_dims", "must be a non-empty list")
        kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
    try:
        return AutoencoderConfig(**kwargs)
    except ConfigError as err:
        raise _nest(err, "ood.autoencoder")


def _resolve_ood(section: dict, train: DatasetBundle, field: str = "ood"):
    """Build one OOD provider from its config section.

    Returns (resolved dict, provider). The latent-perturbation kind
    trains its autoencoder here, seeded by the section's own seed, so
    the provider is identical for every run that shares the section.
    """
    section = _require_mapping(section, field)
    kind = section.get("kind")
    if kind not in _OOD_KEYS:
        raise ConfigError(f"{field}.kind", f"must be one of {sorted(_OOD_KEYS)}, got {kind!r}")
    _check_keys(section, _OOD_KEYS[kind], field)
    if kind == "letters":
        resolved = {
            "kind": "letters",
            "n": _get_number(section, "n", field, 6800, 1, integer=True),
            "seed": _get_number(section, "seed", field, 8, 0, integer=True),
        }
        pool = load_letter_pool(resolved["n"], resolved["seed"])
        return resolved, DatasetOodProvider(pool, expected_dim=train.d)
    if kind == "idx":
        for key in ("images", "labels"):
            value = section.get(key)
            if not isinstance(value, str) or not Path(value).is_file():
                raise ConfigError(f"{field}.{key}", "must be a readable file path")
        try:
            pool = read_idx(section["images"], section["labels"], "ood")
        except IdxFormatError as err:
            raise ConfigError(field, str(err))
        try:
            provider = DatasetOodProvider(pool, expected_dim=train.d)
        except ShapeError as err:
            raise ConfigError(field, str(err))
        return {"kind": "idx", "images": section["images"], "labels": section["labels"]}, provider
    # latent_perturbation
    resolved = {
        "kind": "latent_perturbation",
        "sigma": _get_number(section, "sigma", field, 1.0),
        "latent_dim": _get_number(section, "latent_dim", field, 8, 1, integer=True),
        "seed": _get_number(section, "seed", field, 11, 0, integer=True),
        "autoencoder": dict(section.get("autoencoder", {})),
    }
    if resolved["sigma"] <= 0:
        raise ConfigError(f"{field}.sigma", "must be > 0")
    ae_cfg = _ae_config(resolved["autoencoder"])
    try:
        model = train_autoencoder(train.features, resolved["latent_dim"], resolved["seed"], ae_cfg)
    except (OodModelError, TrainingDivergedError) as err:
        raise ConfigError(field, f"autoencoder training failed: {err}")
    return resolved, LatentOodProvider(model, train.features, resolved["sigma"])


class _OodSections:
    """The config's ``ood`` entry, split per loss kind and built lazily.

    Latent-perturbation sources train an autoencoder, so each section
    is resolved at most once per process even across sweep runs.
    """

    def __init__(self, raw, train: DatasetBundle):
        self._train = train
        self._cache = {}
        self._keyed = False
        if raw is None:
            self._sections = {}
        else:
            raw = _require_mapping(raw, "ood")
            if set(raw) and set(raw) <= {"dpn", "edlgen"}:
                self._sections = dict(raw)
                self._keyed = True
            elif "kind" in raw:
                self._sections = {"dpn": raw, "edlgen": raw}
            else:
                raise ConfigError(
                    "ood",
                    "must be an OOD spec with a 'kind' or a {'dpn': ..., 'edlgen': ...} map",
                )

    def for_loss(self, loss_kind: str):
        """(resolved dict, provider) for the loss kind, or (None, None)."""
        if loss_kind not in self._sections:
            return None, None
        if loss_kind not in self._cache:
            field = f"ood.{loss_kind}" if self._keyed else "ood"
            self._cache[loss_kind] = _resolve_ood(self._sections[loss_kind], self._train, field)
        return self._cache[loss_kind]

    def has(self, loss_kind: str) -> bool:
        return loss_kind in self._sections


class ResolvedExperiment:
    """One fully validated training run, ready to execute."""

    def __init__(self, config, train, test, model_spec, loss_kind, head, provider, seed, out_dir):
        self.config = config
        self.train = train
        self.test = test
        self.model_spec = model_spec
        self.loss_kind = loss_kind
        self.head = head
        self.provider = provider
        self.seed = seed
        self.out_dir = out_dir

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.config["epochs"],
            batch_size=self.config["batch_size"],
            learning_rate=self.config["learning_rate"],
            weight_decay=self.config["weight_decay"],
            head_config=self.head,
            ood_provider=self.provider,
        )

    @property
    def annealing_step(self) -> int:
        """Schedule length, or 0 for heads without an annealing ramp."""
        return getattr(self.head, "annealing_step", 0)


def resolve_experiment(
    cfg: dict,
    out_override=None,
    datasets=None,
    ood_sections: _OodSections | None = None,
) -> ResolvedExperiment:
    """Validate a config dict into a runnable experiment.

    ``datasets`` and ``ood_sections`` let a sweep reuse already-loaded
    data and already-trained OOD sources across grid points.
    """
    cfg = _require_mapping(cfg, "config")
    _check_keys(cfg, _TOP_KEYS, "config")
    for key in ("dataset", "loss"):
        if key not in cfg:
            raise ConfigError(key, "is required")

    if datasets is None:
        dataset_resolved, train, test = _resolve_dataset(cfg)
    else:
        dataset_resolved, train, test = datasets

    loss_resolved, loss_kind, head = _resolve_loss(cfg, train.K)
    model_resolved, model_spec = _resolve_model(
        cfg, train.d, train.K, loss_kind, dataset_resolved["kind"]
    )

    needs_ood = loss_kind in ("dpn", "edlgen")
    if ood_sections is None:
        # standalone resolution: an OOD section on a loss that cannot use
        # one is a config mistake (sweeps share sections across kinds, so
        # the check only applies here)
        if not needs_ood and "ood" in cfg:
            raise ConfigError("ood", "only valid with the 'dpn' or 'edlgen' loss kinds")
        ood_sections = _OodSections(cfg.get("ood"), train)
    if needs_ood and not ood_sections.has(loss_kind):
        raise ConfigError("ood", f"loss kind '{loss_kind}' requires an OOD source")
    ood_resolved, provider = ood_sections.for_loss(loss_kind)

    seed = _get_number(cfg, "seed", "config", 0, 0, integer=True)
    epochs = _get_number(cfg, "epochs", "config", None, 0, integer=True)
    batch_size = _get_number(cfg, "batch_size", "config", 64, 1, integer=True)
    learning_rate = _get_number(cfg, "learning_rate", "config", 1e-3)
    weight_decay = _get_number(cfg, "weight_decay", "config", 1e-4)
    if learning_rate <= 0:
        raise ConfigError("learning_rate", "must be > 0")
    if weight_decay < 0:
        raise ConfigError("weight_decay", "must be >= 0")

    out_dir = out_override if out_override is not None else cfg.get("out_dir")
    if out_dir is None:
        raise ConfigError("out_dir", "is required (or pass --out)")
    if not isinstance(out_dir, (str, Path)):
        raise ConfigError("out_dir", "must be a path string")

    resolved = {
        "dataset": dataset_resolved,
        "model": model_resolved,
        "loss": loss_resolved,
        "seed": seed,
        "epochs": epochs,
        "batch_size": batch_size,
        "learning_rate": learning_rate,
        "weight_decay": weight_decay,
        "out_dir": str(out_dir),
    }
    if ood_resolved is not None:
        resolved["ood"] = ood_resolved
    return ResolvedExperiment(
        config=resolved,
        train=train,
        test=test,
        model_spec=model_spec,
        loss_kind=loss_kind,
        head=head,
        provider=provider,
        seed=seed,
        out_dir=Path(out_dir),
    )


# ---------------------------------------------------------------------------
# artifacts


def _config_line(config: dict) -> str:
    return "config: " + json.dumps(config, sort_keys=True)


def _json_safe(value):
    """Recursively replace non-finite floats with None for strict JSON."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)) and not math.isfinite(value):
        return None
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _write_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(_json_safe(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_checkpoint(path, exp: ResolvedExperiment, params: de.ParamSet):
    arrays = {name: params[name] for name in params}
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_VERSION),
        config_json=np.str_(json.dumps(exp.config, sort_keys=True)),
        **arrays,
    )


def load_checkpoint(path):
    """Rebuild (ModelSpec, ParamSet, resolved config dict) from an archive."""
    with np.load(path) as archive:
        version = int(archive["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(
                "checkpoint", f"format version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        config = json.loads(str(archive["config_json"]))
        params = de.ParamSet(
            {
                name: archive[name]
                for name in archive.files
                if name not in ("format_version", "config_json")
            }
        )
    model = config["model"]
    spec = ModelSpec(
        input_dim=params["w1"].shape[0],
        hidden_dims=tuple(model["hidden_dims"]),
        K=params[f"w{1 + len(model['hidden_dims'])}"].shape[1],
        hidden_activation=model["hidden_activation"],
        output_mode=model["output_mode"],
    )
    return spec, params, config


def _write_metrics_csv(path, metrics, config):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_config_line(config)}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "test_acc"])
        for m in metrics:
            writer.writerow([m.epoch, repr(float(m.train_loss)), repr(float(m.test_accuracy))])


def _write_evidence_csv(path, evidence: np.ndarray, y_true, y_pred, config):
    k = evidence.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_config_line(config)}\n")
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "y_true", "y_pred"] + [f"e_{i + 1}" for i in range(k)])
        for idx in range(len(evidence)):
            writer.writerow(
                [idx, int(y_true[idx]), int(y_pred[idx])]
                + [repr(float(v)) for v in evidence[idx]]
            )


def read_evidence_dump(path):
    """Parse an evidence dump into (records, source config or None).

    Raises DumpFormatError naming the first offending line. Leading
    ``#`` comment lines are allowed; a ``# config: ...`` comment is
    parsed and returned.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("dump", f"{path} is not a readable file")
    source_config = None
    records = []
    k = None
    with open(path, newline="") as fh:
        header = None
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                comment = line.lstrip("#").strip()
                if comment.startswith("config:") and source_config is None:
                    try:
                        source_config = json.loads(comment[len("config:"):])
                    except json.JSONDecodeError:
                        raise DumpFormatError(line_no, "config comment is not valid JSON")
                continue
            fields = line.split(",")
            if header is None:
                header = fields
                k = len(header) - 3
                expected = ["sample_id", "y_true", "y_pred"] + [f"e_{i + 1}" for i in range(k)]
                if k < 2 or header != expected:
                    raise DumpFormatError(
                        line_no,
                        "header must be sample_id,y_true,y_pred,e_1,...,e_K with K >= 2",
                    )
                continue
            if len(fields) != k + 3:
                raise DumpFormatError(line_no, f"expected {k + 3} fields, got {len(fields)}")
            try:
                y_true, y_pred = int(fields[1]), int(fields[2])
                evidence = np.array([float(v) for v in fields[3:]])
            except ValueError as err:
                raise DumpFormatError(line_no, str(err))
            if not np.all(np.isfinite(evidence)) or np.any(evidence < 0):
                raise DumpFormatError(line_no, "evidence values must be finite and >= 0")
            if not (0 <= y_true < k and 0 <= y_pred < k):
                raise DumpFormatError(line_no, f"labels must lie in [0, {k})")
            belief, u, strength, _ = dirichlet_stats(evidence)
            records.append(
                EvidenceRecord(
                    evidence=evidence,
                    alpha=evidence + 1.0,
                    strength=strength,
                    belief=belief,
                    uncertainty=u,
                    y_true=y_true,
                    y_pred=y_pred,
                )
            )
    if header is None:
        raise DumpFormatError(1, "dump has no header row")
    if not records:
        raise DumpFormatError(2, "dump has no data rows")
    return records, source_config


# ---------------------------------------------------------------------------
# subcommands


def _train_and_dump(exp: ResolvedExperiment):
    """Run one training and write the three per-run artifacts."""
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    params, metrics = train_model(
        exp.model_spec, exp.train, exp.test, exp.loss_kind, exp.train_config, exp.seed
    )
    alpha = predict_alpha(exp.model_spec, params, exp.test.features)
    evidence = alpha - 1.0
    y_pred = np.argmax(evidence, axis=1)
    save_checkpoint(exp.out_dir / "checkpoint.npz", exp, params)
    _write_metrics_csv(exp.out_dir / "metrics.csv", metrics, exp.config)
    _write_evidence_csv(
        exp.out_dir / "evidence.csv", evidence, exp.test.labels, y_pred, exp.config
    )
    return records_from_alpha(alpha, exp.test.labels)


def cmd_train(config_path, out_override=None) -> int:
    try:
        exp = resolve_experiment(load_config_file(config_path), out_override)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _train_and_dump(exp)
    except TrainingDivergedError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote checkpoint.npz, metrics.csv, evidence.csv to {exp.out_dir}")
    return EXIT_OK


def _probe_or_none(records, probe_seed):
    try:
        return probe_separability(records, seed=probe_seed), None
    except (StratificationError, DomainError) as err:
        return None, str(err)


def cmd_analyze(dump_path, probe_seed: int = 0, out_override=None) -> int:
    try:
        records, source_config = read_evidence_dump(dump_path)
    except (ConfigError, DumpFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(out_override) if out_override is not None else Path(dump_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    k = records[0].k
    analyze_config = {
        "command": "analyze",
        "dump": str(dump_path),
        "probe_seed": probe_seed,
    }
    preamble = [_config_line(analyze_config)]
    if source_config is not None:
        preamble.append("source " + _config_line(source_config))

    write_cdf_csv(out_dir / "cdf.csv", class_cdf(records, k), preamble=preamble)

    report, probe_skip = _probe_or_none(records, probe_seed)
    if report is not None:
        write_probe_csv(out_dir / "probe_report.csv", report, preamble=preamble)
    else:
        with open(out_dir / "probe_report.csv", "w", newline="") as fh:
            for line in preamble:
                fh.write(f"# {line}\n")
            fh.write(f"# probes skipped: {probe_skip}\n")
            fh.write("probe,accuracy\n")

    recall = per_class_recall(records, k)
    mean_u = per_class_mean_u(records, k)
    summary = {
        "config": analyze_config,
        "source_config": source_config,
        "k": k,
        "n_records": len(records),
        "accuracy": float(np.mean([r.y_pred == r.y_true for r in records])),
        "per_class_recall": [float(v) for v in recall],
        "per_class_mean_u": [float(v) for v in mean_u],
        "probes": None if report is None else {name: report.accuracies[name] for name in report.accuracies},
        "probe_chance_level": None if report is None else report.chance_level,
        "probes_skipped_reason": probe_skip,
    }
    _write_json(out_dir / "summary.json", summary)
    print(f"wrote cdf.csv, probe_report.csv, summary.json to {out_dir}")
    return EXIT_OK


def parse_grid(spec: str) -> dict:
    """Parse ``axis=v1,v2;axis=...`` grid specs into an axes dict."""
    axes = {}
    if not spec or not spec.strip():
        raise ConfigError("grid", "grid spec is empty")
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError("grid", f"expected axis=v1,v2,..., got {part!r}")
        name, _, values_str = part.partition("=")
        name = name.strip()
        values = [v.strip() for v in values_str.split(",") if v.strip()]
        if name not in ("seeds", "annealing_steps", "losses"):
            raise ConfigError("grid", f"unknown axis {name!r} (use seeds, annealing_steps, losses)")
        if name in axes:
            raise ConfigError("grid", f"axis {name!r} given twice")
        if not values:
            raise ConfigError("grid", f"axis {name!r} has no values")
        if name == "losses":
            bad = [v for v in values if v not in LOSS_KINDS]
            if bad:
                raise ConfigError("grid", f"unknown loss kinds {bad}")
            axes[name] = values
        else:
            try:
                parsed = [int(v) for v in values]
            except ValueError:
                raise ConfigError("grid", f"axis {name!r} values must be integers")
            if name == "seeds" and any(v < 0 for v in parsed):
                raise ConfigError("grid", "seeds must be >= 0")
            axes[name] = parsed
    if not axes:
        raise ConfigError("grid", "grid spec is empty")
    for name, values in axes.items():
        if len(set(values)) != len(values):
            raise ConfigError("grid", f"axis {name!r} has duplicate values")
    if "annealing_steps" in axes and "dpn" in axes.get("losses", ()):
        raise ConfigError(
            "grid", "the annealing_steps axis cannot apply to the dpn loss kind"
        )
    return axes


def _derived_seed(base_seed: int, run_index: int) -> int:
    return int(np.random.default_rng([base_seed, run_index]).integers(2**31))


def _grid_points(axes: dict):
    """Expand axes into (loss_kind or None, seed or None, step or None)."""
    losses = axes.get("losses", [None])
    seeds = axes.get("seeds", [None])
    steps = axes.get("annealing_steps", [None])
    return [(kind, seed, step) for kind in losses for seed in seeds for step in steps]


def _run_config(base_cfg: dict, loss_kind, seed, step, run_index: int, base_seed: int):
    """Derive one grid point's config from the base.

    A ``losses`` axis value replaces the loss section unless it matches
    the base section's kind, in which case the base's extra fields
    (e.g. ``ood_weight``) are kept. Without a ``seeds`` axis, the run's
    seed is derived from (base seed, run index) so each run still has
    its own isolated, reproducible RNG stream.
    """
    run_cfg = copy.deepcopy(base_cfg)
    base_loss = base_cfg.get("loss", {})
    if loss_kind is not None:
        if isinstance(base_loss, dict) and base_loss.get("kind") == loss_kind:
            run_cfg["loss"] = copy.deepcopy(base_loss)
        else:
            run_cfg["loss"] = {"kind": loss_kind}
    if step is not None:
        run_cfg["loss"]["annealing_step"] = step
    run_seed = seed if seed is not None else _derived_seed(base_seed, run_index)
    run_cfg["seed"] = run_seed
    kind = run_cfg["loss"].get("kind", "unknown")
    run_id = f"r{run_index:02d}-{kind}-s{run_seed}"
    if step is not None:
        run_id += f"-a{step}"
    return run_cfg, run_id, run_seed


def cmd_sweep(config_path, grid_spec: str, out_override=None) -> int:
    try:
        base_cfg = load_config_file(config_path)
        axes = parse_grid(grid_spec)
        out_dir = out_override if out_override is not None else base_cfg.get("out_dir")
        if out_dir is None:
            raise ConfigError("out_dir", "is required (or pass --out)")
        out_dir = Path(out_dir)
        _check_keys(base_cfg, _TOP_KEYS, "config")
        if "loss" not in base_cfg and "losses" not in axes:
            raise ConfigError("loss", "is required")
        base_seed = _get_number(base_cfg, "seed", "config", 0, 0, integer=True)

        # The dataset and each OOD source are shared by every grid point,
        # so resolve them once up front; this also surfaces base-config
        # errors before any training starts.
        datasets = _resolve_dataset(base_cfg)
        ood_sections = _OodSections(base_cfg.get("ood"), datasets[1])
        points = _grid_points(axes)
        for loss_kind, _, _ in points:
            kind = loss_kind if loss_kind is not None else (
                _require_mapping(base_cfg.get("loss"), "loss").get("kind")
            )
            if kind in ("dpn", "edlgen") and not ood_sections.has(kind):
                raise ConfigError("ood", f"loss kind '{kind}' requires an OOD source")
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir.mkdir(parents=True, exist_ok=True)
    run_records = []
    all_rows = []
    failed = {}

    def mark_failed(run_id, run_seed, step, err):
        failed[run_id] = str(err)
        run_dir = out_dir / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "error.txt").write_text(f"{err}\n")
        for class_index in range(datasets[1].K):
            all_rows.append(
                SweepRow(
                    run_id=run_id,
                    seed=run_seed,
                    annealing_step=step if step is not None else 0,
                    class_index=class_index,
                    recall=float("nan"),
                    mean_u=float("nan"),
                )
            )
        print(f"run {run_id} failed: {err}", file=sys.stderr)

    for run_index, (loss_kind, seed, step) in enumerate(points):
        run_cfg, run_id, run_seed = _run_config(
            base_cfg, loss_kind, seed, step, run_index, base_seed
        )
        run_cfg["out_dir"] = str(out_dir / run_id)
        try:
            exp = resolve_experiment(run_cfg, datasets=datasets, ood_sections=ood_sections)
            records = _train_and_dump(exp)
        except (ConfigError, TrainingDivergedError, OodModelError) as err:
            mark_failed(run_id, run_seed, step, err)
            continue
        run_record = run_record_from_records(
            run_id, run_seed, exp.annealing_step, exp.loss_kind, records, exp.train.K
        )
        run_records.append(run_record)
        for class_index in range(exp.train.K):
            all_rows.append(
                SweepRow(
                    run_id=run_id,
                    seed=run_seed,
                    annealing_step=exp.annealing_step,
                    class_index=class_index,
                    recall=float(run_record.recall[class_index]),
                    mean_u=float(run_record.mean_u[class_index]),
                )
            )
        print(f"run {run_id}: accuracy={run_record.accuracy:.4f}")

    sweep_config = {"base": base_cfg, "grid": grid_spec, "base_seed": base_seed}
    write_sweep_csv(
        out_dir / "sweep_table.csv", all_rows, preamble=[_config_line(sweep_config)]
    )

    per_loss = {}
    for record in run_records:
        per_loss.setdefault(record.loss_kind, []).append(record)
    losses_payload = {}
    for kind, group in sorted(per_loss.items()):
        recalls = np.concatenate([g.recall for g in group])
        mean_us = np.concatenate([g.mean_u for g in group])
        finite = np.isfinite(recalls) & np.isfinite(mean_us)
        entry = {
            "runs": len(group),
            "rows_used": int(finite.sum()),
            "mean_accuracy": float(np.mean([g.accuracy for g in group])),
        }
        try:
            entry["pearson"] = correlation(recalls[finite], mean_us[finite], "pearson")
            entry["spearman"] = correlation(recalls[finite], mean_us[finite], "spearman")
        except (DomainError, UndefinedCorrelationError) as err:
            entry["pearson"] = None
            entry["spearman"] = None
            entry["note"] = str(err)
        losses_payload[kind] = entry
    _write_json(
        out_dir / "correlations.json",
        {
            "config": sweep_config,
            "losses": losses_payload,
            "failed_runs": failed,
            "n_runs": len(points),
        },
    )
    status = "with failures" if failed else "ok"
    print(
        f"sweep {status}: {len(run_records)}/{len(points)} runs succeeded; "
        f"artifacts in {out_dir}"
    )
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evibench",
        description="Train Dirichlet-output classifiers and analyze their evidential signal.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model from a JSON config")
    p_train.add_argument("config", help="path to the experiment config (JSON)")
    p_train.add_argument("--out", help="output directory (overrides config out_dir)")

    p_analyze = sub.add_parser("analyze", help="analyze an evidence dump")
    p_analyze.add_argument("dump", help="path to an evidence.csv dump")
    p_analyze.add_argument("--probe-seed", type=int, default=0, help="probe sub-split seed")
    p_analyze.add_argument("--out", help="output directory (defaults to the dump's directory)")

    p_sweep = sub.add_parser("sweep", help="train a grid of runs and pool their statistics")
    p_sweep.add_argument("config", help="path to the base experiment config (JSON)")
    p_sweep.add_argument(
        "--grid",
        required=True,
        help="axes like 'seeds=0,1,2;annealing_steps=10,20' or 'losses=edl,dpn,edlgen'",
    )
    p_sweep.add_argument("--out", help="output directory (overrides config out_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.out)
    if args.command == "analyze":
        return cmd_analyze(args.dump, args.probe_seed, args.out)
    return cmd_sweep(args.config, args.grid, args.out)


if __name__ == "__main__":
    sys.exit(main())
