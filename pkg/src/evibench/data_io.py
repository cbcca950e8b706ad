"""Dataset ingestion, synthetic mixtures, and deterministic stratified splits.

IDX files are parsed bit-exactly (big-endian magic, dimension sizes, raw
unsigned bytes) and pixels land in [0, 1] after a plain 1/255 scaling, no
mean-centring.  Synthetic data comes from Gaussian mixtures whose per-class
spread is controllable so classes can be given unequal misclassification
rates.  Bundles are immutable after construction and freely shareable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, IdxFormatError, ShapeError, StratificationError

__all__ = [
    "Provenance",
    "DatasetBundle",
    "MixtureSpec",
    "read_idx",
    "write_idx",
    "synth_mixture",
    "split_dataset",
    "stratified_indices",
    "one_hot",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

_SPLIT_TAGS = ("train", "test", "full")


@dataclass(frozen=True)
class Provenance:
    """Where a bundle came from: a source descriptor plus the seed, if any."""

    source: str
    seed: int | None = None


@dataclass(frozen=True)
class DatasetBundle:
    """An immutable feature matrix with integer labels and split metadata."""

    features: np.ndarray
    labels: np.ndarray
    K: int
    split_tag: str
    provenance: Provenance
    image_shape: tuple | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"features must be n x d, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError(
                f"{y.shape} labels for {x.shape[0]} feature rows"
            )
        if not np.all(np.isfinite(x)):
            raise DomainError("features contain non-finite entries")
        if self.K < 2:
            raise DomainError(f"need K >= 2 classes, got {self.K}")
        if y.size and (y.min() < 0 or y.max() >= self.K):
            raise DomainError(f"labels outside [0, {self.K})")
        if self.split_tag not in _SPLIT_TAGS:
            raise DomainError(f"split_tag must be one of {_SPLIT_TAGS}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture recipe: one isotropic cluster per class.

    `stddev` is either one number shared by every class or a per-class
    sequence; unequal spreads are how asymmetric class overlap (and hence a
    recall gap between classes) is produced.
    """

    K: int
    means: tuple
    stddev: object = 1.0
    samples_per_class: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise DomainError(f"need K >= 2 classes, got {self.K}")
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != self.K:
            raise ShapeError(f"means must be K x d, got {means.shape}")
        if not np.all(np.isfinite(means)):
            raise DomainError("means must be finite")
        sig = np.asarray(self.stddev, dtype=np.float64)
        if sig.ndim == 0:
            sig = np.full(self.K, float(sig))
        if sig.shape != (self.K,):
            raise ShapeError(f"stddev must be scalar or length {self.K}")
        if np.any(sig <= 0.0) or not np.all(np.isfinite(sig)):
            raise DomainError("stddev values must be finite and > 0")
        if self.samples_per_class < 1:
            raise DomainError("samples_per_class must be >= 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddev", sig)

    @property
    def d(self) -> int:
        return self.means.shape[1]


def _read_exact(f, n: int, what: str, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxFormatError(
            f"{path}: truncated while reading {what} ({len(data)} of {n} bytes)"
        )
    return data


def _parse_idx(path, expected_magic: int):
    path = Path(path)
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">i", _read_exact(f, 4, "magic", path))
        if magic != expected_magic:
            raise IdxFormatError(
                f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = [
            struct.unpack(">i", _read_exact(f, 4, f"dimension {i}", path))[0]
            for i in range(ndim)
        ]
        count = int(np.prod(dims))
        payload = _read_exact(f, count, "payload", path)
        trailing = f.read()
        if trailing:
            raise IdxFormatError(f"{path}: {len(trailing)} unexpected trailing bytes")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def read_idx(path_images, path_labels, split_tag: str = "full") -> DatasetBundle:
    """Load an image/label IDX pair into a bundle with pixels in [0, 1]."""
    img_dims, img_raw = _parse_idx(path_images, IMAGE_MAGIC)
    lab_dims, lab_raw = _parse_idx(path_labels, LABEL_MAGIC)
    n, rows, cols = img_dims
    if lab_dims[0] != n:
        raise IdxFormatError(
            f"sample counts differ: {n} images vs {lab_dims[0]} labels"
        )
    features = img_raw.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = lab_raw.astype(np.int64)
    k = int(labels.max()) + 1 if labels.size else 2
    return DatasetBundle(
        features=features,
        labels=labels,
        K=max(k, 2),
        split_tag=split_tag,
        provenance=Provenance(source=f"idx:{Path(path_images).name}"),
        image_shape=(rows, cols),
    )


def write_idx(features, labels, path_images, path_labels, image_shape) -> None:
    """Serialise unit-scaled features and labels back to an IDX pair.

    Inverse of read_idx: pixels are rescaled by 255 and rounded, so a
    read -> write cycle reproduces the original bytes exactly.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    rows, cols = image_shape
    if x.ndim != 2 or x.shape[1] != rows * cols:
        raise ShapeError(f"features {x.shape} do not match image shape {image_shape}")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{y.shape} labels for {x.shape[0]} images")
    pixels = np.rint(x * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DomainError("features must lie in [0, 1]")
    with open(path_images, "wb") as f:
        f.write(struct.pack(">iiii", IMAGE_MAGIC, x.shape[0], rows, cols))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">ii", LABEL_MAGIC, x.shape[0]))
        f.write(y.astype(np.uint8).tobytes())


def synth_mixture(spec: MixtureSpec) -> DatasetBundle:
    """Draw exactly samples_per_class points from each class cluster."""
    rng = np.random.default_rng(spec.seed)
    blocks, labels = [], []
    for k in range(spec.K):
        pts = spec.means[k] + spec.stddev[k] * rng.standard_normal(
            (spec.samples_per_class, spec.d)
        )
        blocks.append(pts)
        labels.append(np.full(spec.samples_per_class, k, dtype=np.int64))
    return DatasetBundle(
        features=np.vstack(blocks),
        labels=np.concatenate(labels),
        K=spec.K,
        split_tag="full",
        provenance=Provenance(source="mixture", seed=spec.seed),
    )


def stratified_indices(labels, fractions, seed) -> list:
    """Partition index positions by class-stratified fractions.

    Within each class the order is shuffled by the seed, counts per part
    are assigned by largest remainder (exact totals), and each returned
    index array is sorted ascending.  A class with fewer samples than
    parts cannot be stratified and raises.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0.0 for f in fractions):
        raise DomainError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DomainError(f"fractions must sum to 1, got {sum(fractions)}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list] = [[] for _ in fractions]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < len(fractions):
            raise StratificationError(
                f"class {cls} has {idx.size} samples for {len(fractions)} parts"
            )
        idx = rng.permutation(idx)
        quotas = np.array([f * idx.size for f in fractions])
        counts = np.floor(quotas).astype(int)
        remainder = quotas - counts
        # Hand leftovers to the largest remainders; ties go to the larger
        # fraction, then the earlier part, so allocation is deterministic.
        order = sorted(
            range(len(fractions)),
            key=lambda j: (-remainder[j], -fractions[j], j),
        )
        for j in order[: idx.size - counts.sum()]:
            counts[j] += 1
        offset = 0
        for j, c in enumerate(counts):
            parts[j].extend(idx[offset : offset + c].tolist())
            offset += c
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


def split_dataset(bundle: DatasetBundle, fractions, seed) -> list:
    """Split a bundle into disjoint, exhaustive, class-stratified parts.

    A two-way split is tagged (train, test); other arities keep the parent
    tag.  Same seed, same splits.
    """
    parts = stratified_indices(bundle.labels, fractions, seed)
    if len(parts) == 2:
        tags = ("train", "test")
    else:
        tags = tuple(bundle.split_tag for _ in parts)
    out = []
    for j, idx in enumerate(parts):
        out.append(
            DatasetBundle(
                features=bundle.features[idx],
                labels=bundle.labels[idx],
                K=bundle.K,
                split_tag=tags[j],
                provenance=Provenance(
                    source=f"{bundle.provenance.source}/split{j}",
                    seed=bundle.provenance.seed,
                ),
                image_shape=bundle.image_shape,
            )
        )
    return out


def one_hot(labels, k: int) -> np.ndarray:
    """Integer labels to a float one-hot matrix of width k."""
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ShapeError(f"labels must be a vector, got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DomainError(f"labels outside [0, {k})")
    return np.eye(k, dtype=np.float64)[y]
