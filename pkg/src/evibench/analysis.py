"""Evidential-signal diagnostics over trained Dirichlet classifiers.

The signal of interest is the per-sample Dirichlet strength S (equivalently
its monotone inverse, the uncertainty mass u = K/S). This module turns raw
evidence outputs into records, aggregates them into per-class recall and
mean-uncertainty summaries, measures how strongly those co-vary across
training runs (Pearson and Spearman over pooled (run, class) rows), builds
per-class strength CDFs, and asks how much class identity a probe can
recover from the scalar strength alone.

All probes are exact one-dimensional fits (exhaustive threshold search,
greedy depth-3 tree, 32-bin histogram majority): on a scalar feature these
dominate generic learners while keeping the module dependency-free and
bitwise deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .data_io import stratified_indices
from .errors import (
    DomainError,
    ShapeError,
    StratificationError,
    UndefinedCorrelationError,
)

__all__ = [
    "EvidenceRecord",
    "RunRecord",
    "ProbeReport",
    "SweepRow",
    "dirichlet_stats",
    "records_from_alpha",
    "per_class_recall",
    "per_class_mean_u",
    "correlation",
    "class_cdf",
    "probe_separability",
    "run_record_from_records",
    "sweep_aggregate",
    "write_cdf_csv",
    "write_sweep_csv",
    "write_probe_csv",
]

PROBE_NAMES = ("stump", "tree_depth3", "histogram_bayes")


# ---------------------------------------------------------------------------
# record types


@dataclass(frozen=True)
class EvidenceRecord:
    """One test sample's Dirichlet output and its derived quantities.

    Satisfies S = sum(alpha), b_k = e_k / S, u = K / S, sum(b) + u = 1.
    """

    evidence: np.ndarray
    alpha: np.ndarray
    strength: float
    belief: np.ndarray
    uncertainty: float
    y_true: int
    y_pred: int

    @property
    def k(self) -> int:
        return len(self.evidence)


@dataclass(frozen=True)
class RunRecord:
    """Summary of one training run for the recall/uncertainty sweep."""

    run_id: str
    seed: int
    annealing_step: int
    loss_kind: str
    recall: np.ndarray
    mean_u: np.ndarray
    accuracy: float

    def __post_init__(self):
        if len(self.recall) != len(self.mean_u):
            raise ShapeError(
                f"recall has length {len(self.recall)}, mean_u {len(self.mean_u)}"
            )
        finite = self.recall[np.isfinite(self.recall)]
        if np.any((finite < 0) | (finite > 1)):
            raise DomainError("recall entries must lie in [0, 1]")


@dataclass(frozen=True)
class ProbeReport:
    """Accuracies of strength-only probes next to the model and chance."""

    accuracies: Dict[str, float]
    model_accuracy: float
    chance_level: float

    def __post_init__(self):
        for name, acc in {
            **self.accuracies,
            "model": self.model_accuracy,
            "chance": self.chance_level,
        }.items():
            if not (0.0 <= acc <= 1.0):
                raise DomainError(f"accuracy {name!r} outside [0, 1]: {acc}")


@dataclass(frozen=True)
class SweepRow:
    """One (run, class) cell of the flattened sweep table."""

    run_id: str
    seed: int
    annealing_step: int
    class_index: int
    recall: float
    mean_u: float


# ---------------------------------------------------------------------------
# per-sample statistics


def dirichlet_stats(evidence: np.ndarray) -> Tuple[np.ndarray, float, float, int]:
    """Belief vector, uncertainty mass, strength, and argmax prediction.

    Ties in the argmax go to the lowest class index.
    """
    e = np.asarray(evidence, dtype=np.float64)
    if e.ndim != 1 or len(e) < 2:
        raise ShapeError(f"evidence must be a vector of length >= 2, got shape {e.shape}")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise DomainError("evidence entries must be finite and >= 0")
    k = len(e)
    strength = float(np.sum(e + 1.0))
    belief = e / strength
    uncertainty = k / strength
    return belief, uncertainty, strength, int(np.argmax(e))


def records_from_alpha(alpha: np.ndarray, labels: np.ndarray) -> List[EvidenceRecord]:
    """Build evidence records from a batch of Dirichlet parameters."""
    alpha = np.asarray(alpha, dtype=np.float64)
    labels = np.asarray(labels)
    if alpha.ndim != 2 or alpha.shape[1] < 2:
        raise ShapeError(f"alpha must be (n, K>=2), got shape {alpha.shape}")
    if len(labels) != len(alpha):
        raise ShapeError(
            f"{len(labels)} labels for {len(alpha)} alpha rows"
        )
    if np.any(alpha < 1.0):
        raise DomainError("alpha rows must be >= 1 (evidence must be >= 0)")
    k = alpha.shape[1]
    if np.any((labels < 0) | (labels >= k)):
        raise DomainError(f"labels must lie in [0, {k})")
    records = []
    for row, y in zip(alpha, labels):
        evidence = row - 1.0
        belief, u, strength, y_pred = dirichlet_stats(evidence)
        records.append(
            EvidenceRecord(
                evidence=evidence,
                alpha=row.copy(),
                strength=strength,
                belief=belief,
                uncertainty=u,
                y_true=int(y),
                y_pred=y_pred,
            )
        )
    return records


# ---------------------------------------------------------------------------
# aggregation


def _require_records(records: Sequence[EvidenceRecord]):
    if not records:
        raise DomainError("record list is empty")
    k = records[0].k
    if any(r.k != k for r in records):
        raise ShapeError("records disagree on class count")
    return k


def per_class_recall(records: Sequence[EvidenceRecord], k: int) -> np.ndarray:
    """Fraction of each class's samples predicted correctly.

    Classes absent from the records get NaN (undefined); downstream
    correlations skip those entries.
    """
    _require_records(records)
    correct = np.zeros(k)
    total = np.zeros(k)
    for r in records:
        total[r.y_true] += 1
        correct[r.y_true] += r.y_pred == r.y_true
    with np.errstate(invalid="ignore"):
        return np.where(total > 0, correct / np.maximum(total, 1), np.nan)


def per_class_mean_u(records: Sequence[EvidenceRecord], k: int) -> np.ndarray:
    """Mean uncertainty mass per ground-truth class (NaN when absent)."""
    _require_records(records)
    sums = np.zeros(k)
    total = np.zeros(k)
    for r in records:
        total[r.y_true] += 1
        sums[r.y_true] += r.uncertainty
    with np.errstate(invalid="ignore"):
        return np.where(total > 0, sums / np.maximum(total, 1), np.nan)


def correlation(x, y, method: str = "pearson") -> float:
    """Pearson or Spearman correlation of two equal-length vectors.

    Spearman is Pearson on average ranks (ties share their mean rank).
    Constant input has no defined correlation and raises.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if method not in ("pearson", "spearman"):
        raise DomainError(f"unknown correlation method {method!r}")
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"x and y must be equal-length vectors, got {x.shape}, {y.shape}")
    if len(x) < 3:
        raise DomainError(f"correlation needs length >= 3, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("correlation inputs must be finite")
    if method == "spearman":
        x, y = rankdata(x), rankdata(y)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError(
            "correlation undefined for constant input"
        )
    return float(np.sum(xc * yc) / (sx * sy))


def class_cdf(
    records: Sequence[EvidenceRecord], k: int
) -> Dict[int, List[Tuple[float, float]]]:
    """Per-class empirical CDF of Dirichlet strength.

    Duplicate strength values collapse to their final cumulative fraction,
    so each class's list is strictly increasing in value and ends at 1.0.
    """
    _require_records(records)
    by_class: Dict[int, List[float]] = {c: [] for c in range(k)}
    for r in records:
        by_class[r.y_true].append(r.strength)
    out: Dict[int, List[Tuple[float, float]]] = {}
    for c in range(k):
        values = by_class[c]
        if not values:
            raise DomainError(f"class {c} has no records; CDF undefined")
        values.sort()
        n = len(values)
        pairs: List[Tuple[float, float]] = []
        for i, v in enumerate(values, start=1):
            if pairs and pairs[-1][0] == v:
                pairs[-1] = (v, i / n)
            else:
                pairs.append((v, i / n))
        out[c] = pairs
    return out


# ---------------------------------------------------------------------------
# strength-only probes


def _majority(labels: np.ndarray, k: int) -> int:
    """Most frequent label; ties go to the lowest class index."""
    return int(np.argmax(np.bincount(labels, minlength=k)))


def _canonical_orientation(x: np.ndarray, y: np.ndarray) -> float:
    """Sign that makes threshold fits invariant to monotone transforms.

    Tie-breaking among equally good splits depends on scan direction, so
    the stump and tree fit on ``orient * x`` where the orientation puts
    the lowest present class's mean rank in the lower half. A strictly
    decreasing reparametrisation (such as u = K/S) flips the ranks and
    the orientation together, leaving the canonical order unchanged.
    """
    ranks = rankdata(x)
    lowest = int(np.min(y))
    m0 = ranks[y == lowest].mean()
    return 1.0 if m0 <= (len(x) + 1) / 2.0 else -1.0


def _split_candidates(ws: np.ndarray):
    """Indices i where sorted feature values step up: left block = ws[:i].

    Splitting at block boundaries (not midpoints) keeps test-side
    comparisons equivariant under monotone reparametrisation.
    """
    return [i for i in range(1, len(ws)) if ws[i - 1] < ws[i]]


def _fit_stump(w: np.ndarray, y: np.ndarray, k: int):
    """Exhaustive 1-D threshold search; each side predicts its majority.

    Returns (boundary, left_class, right_class); a None boundary means a
    constant (majority) predictor. Points with value <= boundary go left.
    """
    order = np.argsort(w, kind="stable")
    ws, ys = w[order], y[order]
    cum = np.zeros((len(ws) + 1, k), dtype=np.int64)
    for i, label in enumerate(ys):
        cum[i + 1] = cum[i]
        cum[i + 1, label] += 1
    total = cum[-1]
    best = (None, int(np.argmax(total)), int(np.argmax(total)))
    best_correct = int(np.max(total))
    for i in _split_candidates(ws):
        left, right = cum[i], total - cum[i]
        correct = int(np.max(left) + np.max(right))
        if correct > best_correct:
            best = (ws[i - 1], int(np.argmax(left)), int(np.argmax(right)))
            best_correct = correct
    return best


def _predict_stump(stump, w: np.ndarray) -> np.ndarray:
    boundary, cl, cr = stump
    if boundary is None:
        return np.full(len(w), cl, dtype=np.int64)
    return np.where(w <= boundary, cl, cr)


def _gini_counts(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts / n
    return float(1.0 - np.sum(p * p))


def _fit_tree(w: np.ndarray, y: np.ndarray, k: int, depth: int):
    """Greedy exact 1-D splits minimising weighted Gini, to a fixed depth."""
    if depth == 0 or len(np.unique(y)) == 1:
        return ("leaf", _majority(y, k))
    order = np.argsort(w, kind="stable")
    ws, ys = w[order], y[order]
    cum = np.zeros((len(ws) + 1, k), dtype=np.int64)
    for i, label in enumerate(ys):
        cum[i + 1] = cum[i]
        cum[i + 1, label] += 1
    total = cum[-1]
    best_i, best_imp = None, np.inf
    for i in _split_candidates(ws):
        left, right = cum[i], total - cum[i]
        imp = (i * _gini_counts(left) + (len(ws) - i) * _gini_counts(right)) / len(ws)
        if imp < best_imp:
            best_i, best_imp = i, imp
    if best_i is None:
        return ("leaf", _majority(y, k))
    return (
        "node",
        ws[best_i - 1],
        _fit_tree(ws[:best_i], ys[:best_i], k, depth - 1),
        _fit_tree(ws[best_i:], ys[best_i:], k, depth - 1),
    )


def _predict_tree(tree, x: np.ndarray) -> np.ndarray:
    if tree[0] == "leaf":
        return np.full(len(x), tree[1], dtype=np.int64)
    _, t, left, right = tree
    out = np.empty(len(x), dtype=np.int64)
    mask = x <= t
    out[mask] = _predict_tree(left, x[mask])
    out[~mask] = _predict_tree(right, x[~mask])
    return out


def _fit_histogram(x: np.ndarray, y: np.ndarray, k: int, n_bins: int = 32):
    """Per-bin majority classifier over an equal-width binning of x."""
    lo, hi = float(np.min(x)), float(np.max(x))
    fallback = _majority(y, k)
    if lo == hi:
        return lo, hi, np.full(n_bins, fallback, dtype=np.int64)
    idx = np.clip(((x - lo) / (hi - lo) * n_bins).astype(np.int64), 0, n_bins - 1)
    counts = np.zeros((n_bins, k), dtype=np.int64)
    np.add.at(counts, (idx, y), 1)
    classes = np.where(
        counts.sum(axis=1) > 0, np.argmax(counts, axis=1), fallback
    ).astype(np.int64)
    return lo, hi, classes


def _predict_histogram(hist, x: np.ndarray) -> np.ndarray:
    lo, hi, classes = hist
    n_bins = len(classes)
    if lo == hi:
        return np.full(len(x), classes[0], dtype=np.int64)
    idx = np.clip(((x - lo) / (hi - lo) * n_bins).astype(np.int64), 0, n_bins - 1)
    return classes[idx]


def probe_separability(
    records: Sequence[EvidenceRecord],
    seed: int,
    min_per_class: int = 10,
    feature: str = "strength",
) -> ProbeReport:
    """How much class identity simple probes recover from strength alone.

    The scalar feature (Dirichlet strength, or its monotone inverse u via
    ``feature="uncertainty"``) is sub-split 80:20 stratified by true
    class; each probe is fit on the 80% slice and scored on the 20%
    slice. ``chance_level`` is the sub-test majority-class fraction, the
    best any constant predictor could do.
    """
    k = _require_records(records)
    if feature not in ("strength", "uncertainty"):
        raise DomainError(f"unknown probe feature {feature!r}")
    labels = np.array([r.y_true for r in records], dtype=np.int64)
    counts = np.bincount(labels, minlength=k)
    if np.any(counts < min_per_class):
        short = int(np.argmin(counts))
        raise StratificationError(
            f"class {short} has {counts[short]} records; probes need "
            f"at least {min_per_class} per class"
        )
    x = np.array(
        [r.strength if feature == "strength" else r.uncertainty for r in records]
    )
    fit_idx, test_idx = stratified_indices(labels, (0.8, 0.2), seed=seed)
    x_fit, y_fit = x[fit_idx], labels[fit_idx]
    x_test, y_test = x[test_idx], labels[test_idx]

    orient = _canonical_orientation(x_fit, y_fit)
    w_fit, w_test = orient * x_fit, orient * x_test
    stump = _fit_stump(w_fit, y_fit, k)
    tree = _fit_tree(w_fit, y_fit, k, depth=3)
    hist = _fit_histogram(x_fit, y_fit, k)
    accuracies = {
        "stump": float(np.mean(_predict_stump(stump, w_test) == y_test)),
        "tree_depth3": float(np.mean(_predict_tree(tree, w_test) == y_test)),
        "histogram_bayes": float(np.mean(_predict_histogram(hist, x_test) == y_test)),
    }
    model_accuracy = float(np.mean([r.y_pred == r.y_true for r in records]))
    chance = float(np.max(np.bincount(y_test, minlength=k)) / len(y_test))
    return ProbeReport(
        accuracies=accuracies, model_accuracy=model_accuracy, chance_level=chance
    )


# ---------------------------------------------------------------------------
# sweep aggregation


def run_record_from_records(
    run_id: str,
    seed: int,
    annealing_step: int,
    loss_kind: str,
    records: Sequence[EvidenceRecord],
    k: int,
) -> RunRecord:
    """Collapse one run's evidence records into a sweep summary row."""
    return RunRecord(
        run_id=run_id,
        seed=seed,
        annealing_step=annealing_step,
        loss_kind=loss_kind,
        recall=per_class_recall(records, k),
        mean_u=per_class_mean_u(records, k),
        accuracy=float(np.mean([r.y_pred == r.y_true for r in records])),
    )


def sweep_aggregate(runs: Sequence[RunRecord]):
    """Flatten runs into (run, class) rows and correlate recall with mean-u.

    Needs at least 5 runs. Rows whose recall or mean-u is undefined
    (class absent in that run's test set) are emitted with NaN but
    excluded from the pooled correlations.
    """
    if len(runs) < 5:
        raise DomainError(f"sweep aggregation needs >= 5 runs, got {len(runs)}")
    rows: List[SweepRow] = []
    for run in runs:
        for c in range(len(run.recall)):
            rows.append(
                SweepRow(
                    run_id=run.run_id,
                    seed=run.seed,
                    annealing_step=run.annealing_step,
                    class_index=c,
                    recall=float(run.recall[c]),
                    mean_u=float(run.mean_u[c]),
                )
            )
    recalls = np.array([r.recall for r in rows])
    mean_us = np.array([r.mean_u for r in rows])
    defined = np.isfinite(recalls) & np.isfinite(mean_us)
    correlations = {
        "pearson": correlation(recalls[defined], mean_us[defined], "pearson"),
        "spearman": correlation(recalls[defined], mean_us[defined], "spearman"),
    }
    return rows, correlations


# ---------------------------------------------------------------------------
# CSV emission


def _write_preamble(fh, preamble):
    """Comment lines (leading '#') carrying provenance ahead of the header."""
    for line in preamble or ():
        fh.write(f"# {line}\n")


def write_cdf_csv(path, cdf_map: Dict[int, List[Tuple[float, float]]], preamble=None):
    """Emit per-class strength CDFs as class,strength,cum_fraction rows."""
    with open(path, "w", newline="") as fh:
        _write_preamble(fh, preamble)
        writer = csv.writer(fh)
        writer.writerow(["class", "strength", "cum_fraction"])
        for c in sorted(cdf_map):
            for value, fraction in cdf_map[c]:
                writer.writerow([c, repr(value), repr(fraction)])


def write_sweep_csv(path, rows: Sequence[SweepRow], preamble=None):
    """Emit the flattened sweep table."""
    with open(path, "w", newline="") as fh:
        _write_preamble(fh, preamble)
        writer = csv.writer(fh)
        writer.writerow(["run", "seed", "annealing_step", "class", "recall", "mean_u"])
        for r in rows:
            writer.writerow(
                [
                    r.run_id,
                    r.seed,
                    r.annealing_step,
                    r.class_index,
                    repr(r.recall),
                    repr(r.mean_u),
                ]
            )


def write_probe_csv(path, report: ProbeReport, preamble=None):
    """Emit probe accuracies plus the model and chance reference rows."""
    with open(path, "w", newline="") as fh:
        _write_preamble(fh, preamble)
        writer = csv.writer(fh)
        writer.writerow(["probe", "accuracy"])
        for name in PROBE_NAMES:
            writer.writerow([name, repr(report.accuracies[name])])
        writer.writerow(["model", repr(report.model_accuracy)])
        writer.writerow(["chance", repr(report.chance_level)])
