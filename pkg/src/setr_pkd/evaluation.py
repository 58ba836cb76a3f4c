"""Patient-level cross-validation and fraction-based metrics."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .distill import SegmentSpec, infer, prefix_inputs
from .features import SampleRecord
from .model import SetrModel, predict

DEFAULT_FRACTIONS = (Fraction(1, 4), Fraction(1, 2), Fraction(3, 4), Fraction(1))


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    confusion: np.ndarray

    @property
    def tp(self) -> int:
        return int(self.confusion[1, 1])

    @property
    def fp(self) -> int:
        return int(self.confusion[0, 1])

    @property
    def fn(self) -> int:
        return int(self.confusion[1, 0])

    @property
    def tn(self) -> int:
        return int(self.confusion[0, 0])


def _safe_div(a: float, b: float) -> float:
    return a / b if b > 0 else 0.0


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    """Rows are true classes, columns predictions.

    Binary problems score class 1 (TCS); more classes are macro-averaged.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    accuracy = _safe_div(np.trace(confusion), total)
    classes = [1] if confusion.shape[0] == 2 else list(range(confusion.shape[0]))
    ps, rs, fs = [], [], []
    for c in classes:
        tp = confusion[c, c]
        p = _safe_div(tp, confusion[:, c].sum())
        r = _safe_div(tp, confusion[c, :].sum())
        ps.append(p)
        rs.append(r)
        fs.append(_safe_div(2 * p * r, p + r))
    return Metrics(float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs)), float(accuracy), confusion)


def confusion_matrix(y_true, y_pred, classes: int = 2) -> np.ndarray:
    out = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(out, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return out


def metrics_from_predictions(y_true, y_pred, classes: int = 2) -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, classes))


@dataclass
class FoldPlan:
    assignments: dict[str, int]
    folds: int
    stratified: bool

    def fold_of(self, record: SampleRecord) -> int:
        return self.assignments[record.patient_id]

    def split(self, records: Sequence[SampleRecord], fold: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
        """(training pool, test set) for one fold."""
        test = [r for r in records if self.assignments[r.patient_id] == fold]
        rest = [r for r in records if self.assignments[r.patient_id] != fold]
        return rest, test


def _patient_labels(records: Sequence[SampleRecord]) -> dict[str, int]:
    by_patient: dict[str, Counter] = defaultdict(Counter)
    for r in records:
        by_patient[r.patient_id][r.label] += 1
    # majority label, ties to the higher label so seizure patients group together
    return {p: max(c.items(), key=lambda kv: (kv[1], kv[0]))[0] for p, c in by_patient.items()}


def kfold_split(records: Sequence[SampleRecord], folds: int, stratified: bool = False, seed: int = 0) -> FoldPlan:
    """Assign whole patients to folds, dealing them round-robin after a seeded shuffle.

    With ``stratified`` patients are dealt class by class, which keeps every
    fold within one patient of the global class proportions.
    """
    patients = sorted({r.patient_id for r in records})
    if folds < 1:
        raise ValueError("folds must be >= 1")
    if folds > len(patients):
        raise ValueError(f"{folds} folds requested but only {len(patients)} patients")
    rng = np.random.default_rng(seed)
    if stratified:
        labels = _patient_labels(records)
        groups = [[p for p in patients if labels[p] == c] for c in sorted(set(labels.values()))]
    else:
        groups = [patients]
    assignments: dict[str, int] = {}
    slot = 0
    for group in groups:
        for i in rng.permutation(len(group)):
            assignments[group[i]] = slot % folds
            slot += 1
    return FoldPlan(assignments, folds, stratified)


def fraction_level(fraction: Fraction, k: int) -> int:
    """Segment level j with (j + 1) / k == fraction."""
    level = Fraction(fraction) * k - 1
    if level.denominator != 1 or not 0 <= level < k:
        raise ValueError(f"fraction {fraction} is not representable with k={k}")
    return int(level)


def evaluate(
    model: SetrModel | Mapping[int, SetrModel],
    records: Sequence[SampleRecord],
    fractions: Sequence[Fraction],
    k: int,
    classes: int = 2,
) -> dict[Fraction, Metrics]:
    """Metrics per prefix fraction.

    ``model`` is either one model used at every fraction or a mapping from
    segment level to the model trained for that level.
    """
    levels = {Fraction(f): fraction_level(Fraction(f), k) for f in fractions}
    labels = np.array([r.label for r in records])
    results = {}
    for fraction, level in levels.items():
        m = model[level] if isinstance(model, Mapping) else model
        out = infer(m, prefix_inputs(records, SegmentSpec(k, level), m.config.n_tokens))
        results[fraction] = metrics_from_predictions(labels, predict(out.logits), classes)
    return results


def fold_summary(per_fold: Sequence[Metrics | Mapping]) -> dict[str, tuple[float, float]]:
    """Arithmetic mean and population std across folds of each score."""
    out = {}
    for name in ("precision", "recall", "f1", "accuracy"):
        vals = np.array([m[name] if isinstance(m, Mapping) else getattr(m, name) for m in per_fold])
        out[name] = (float(vals.mean()), float(vals.std()))
    return out
