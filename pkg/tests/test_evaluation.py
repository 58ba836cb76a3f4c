from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setr_pkd.evaluation import (
    evaluate,
    fold_summary,
    fraction_level,
    kfold_split,
    metrics_from_confusion,
    metrics_from_predictions,
)
from setr_pkd.features import FEATURE_DIM, SampleRecord
from setr_pkd.model import SetrConfig, SetrModel


def cohort(labels, samples_per_patient=1):
    recs = []
    for p, label in enumerate(labels):
        for s in range(samples_per_patient):
            recs.append(SampleRecord(f"P{p:03d}-S{s}", f"P{p:03d}", label, 8.0, np.zeros((8, FEATURE_DIM))))
    return recs


def test_confusion_arithmetic_example():
    m = metrics_from_confusion(np.array([[3, 1], [1, 3]]))
    assert (m.precision, m.recall, m.f1, m.accuracy) == (0.75, 0.75, 0.75, 0.75)
    assert (m.tp, m.fp, m.fn, m.tn) == (3, 1, 1, 3)


def test_perfect_predictor():
    y = [0, 1, 1, 0, 1]
    m = metrics_from_predictions(y, y)
    assert (m.precision, m.recall, m.f1, m.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_majority_predictor_on_balanced_set():
    y = [0, 1] * 5
    ones = metrics_from_predictions(y, [1] * 10)
    zeros = metrics_from_predictions(y, [0] * 10)
    assert ones.accuracy == zeros.accuracy == 0.5
    assert ones.recall == 1.0 and zeros.recall == 0.0
    assert zeros.f1 == 0.0


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_metrics_satisfy_definitions(pairs):
    y_true, y_pred = zip(*pairs)
    m = metrics_from_predictions(y_true, y_pred)
    assert m.confusion.sum() == len(pairs)
    p, r = m.precision, m.recall
    assert m.f1 == (2 * p * r / (p + r) if p + r > 0 else 0.0)
    assert m.accuracy == (m.tp + m.tn) / len(pairs)


def test_forty_patients_five_folds_gives_eight_each():
    plan = kfold_split(cohort([0, 1] * 20), 5, seed=0)
    counts = np.bincount(list(plan.assignments.values()), minlength=5)
    assert counts.tolist() == [8] * 5


def test_single_fold_holds_everything():
    recs = cohort([0, 1, 0])
    pool, test = kfold_split(recs, 1).split(recs, 0)
    assert pool == [] and len(test) == 3


def test_too_many_folds_rejected():
    with pytest.raises(ValueError):
        kfold_split(cohort([0, 1, 0]), 4)


@given(st.lists(st.integers(0, 1), min_size=2, max_size=50), st.integers(2, 10), st.integers(0, 1000), st.booleans())
def test_folds_partition_patients(labels, folds, seed, stratified):
    recs = cohort(labels, samples_per_patient=2)
    folds = min(folds, len(labels))
    plan = kfold_split(recs, folds, stratified, seed)
    seen = []
    for f in range(folds):
        pool, test = plan.split(recs, f)
        assert not {r.patient_id for r in pool} & {r.patient_id for r in test}
        assert len(pool) + len(test) == len(recs)
        seen += [r.sample_id for r in test]
    assert sorted(seen) == sorted(r.sample_id for r in recs)


@given(st.lists(st.integers(0, 1), min_size=10, max_size=60), st.integers(2, 10), st.integers(0, 1000))
def test_stratified_folds_track_global_proportion(labels, folds, seed):
    recs = cohort(labels)
    plan = kfold_split(recs, folds, True, seed)
    share = np.mean(labels)
    for f in range(folds):
        _, test = plan.split(recs, f)
        positives = sum(r.label for r in test)
        assert abs(positives - share * len(test)) <= 1 + 1e-9


def test_split_is_seeded():
    recs = cohort([0, 1] * 10)
    assert kfold_split(recs, 5, seed=3).assignments == kfold_split(recs, 5, seed=3).assignments
    assert kfold_split(recs, 5, seed=3).assignments != kfold_split(recs, 5, seed=4).assignments


def test_fraction_level_mapping():
    assert fraction_level(Fraction(1, 4), 8) == 1
    assert fraction_level(Fraction(1), 4) == 3
    with pytest.raises(ValueError):
        fraction_level(Fraction(1, 3), 4)


def test_evaluate_returns_each_fraction():
    cfg = SetrConfig(n_tokens=4, dim=8, heads=2, layers=1)
    model = SetrModel.create(cfg, np.random.default_rng(0))
    scores = evaluate(model, cohort([0, 1, 1, 0]), [Fraction(1, 2), Fraction(1)], 4)
    assert set(scores) == {Fraction(1, 2), Fraction(1)}
    assert all(m.confusion.sum() == 4 for m in scores.values())
    with pytest.raises(ValueError):
        evaluate(model, cohort([0, 1]), [Fraction(1, 3)], 4)


def test_fold_summary_mean_and_std():
    rows = [{"precision": 1.0, "recall": 0.5, "f1": 0.5, "accuracy": 0.5},
            {"precision": 0.0, "recall": 0.5, "f1": 0.5, "accuracy": 1.0}]
    s = fold_summary(rows)
    assert s["precision"] == (0.5, 0.5) and s["recall"] == (0.5, 0.0)
