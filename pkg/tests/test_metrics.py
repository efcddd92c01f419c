import math

import numpy as np
import pytest

from triprobe.metrics import (average_precision, component_ap, crossval_summary,
                              format_mean_std, mean_ap_ivt)
from triprobe.triplets import build_table, component_logits, full_product_table, project_labels


def ap_oracle(scores, labels):
    """Independent AP: mean precision at each positive's rank, stable order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else None


def test_worked_example():
    ap = average_precision([0.9, 0.8, 0.1], [1, 0, 1])
    assert ap == pytest.approx(0.83333333, abs=1e-6)


def test_all_positives_first():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0


def test_no_positives_undefined():
    assert average_precision([0.5, 0.3], [0, 0]) is None


def test_matches_oracle_random():
    rng = np.random.default_rng(14)
    for _ in range(300):
        n = int(rng.integers(1, 13))
        scores = rng.permutation(n) + rng.random(n) * 0.0  # distinct integers
        scores = scores.astype(float)
        labels = (rng.random(n) < 0.4).astype(int)
        got = average_precision(scores, labels)
        want = ap_oracle(list(scores), list(labels))
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-12)


def test_tie_break_by_original_index():
    # equal scores: stable ranking keeps original order, so the positive at
    # index 0 is ranked first
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5


def test_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal(20)
    labels = (rng.random(20) < 0.3).astype(int)
    labels[0] = 1
    a = average_precision(scores, labels)
    b = average_precision(np.exp(scores * 2.0), labels)
    assert a == pytest.approx(b, abs=1e-12)


def test_input_validation():
    with pytest.raises(ValueError):
        average_precision([0.1], [1, 0])
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [0, 2])


def test_component_ap_identity_projection():
    t = full_product_table(2, 2, 2)
    rng = np.random.default_rng(8)
    scores = rng.random((12, 8))
    labels = np.zeros((12, 8), dtype=int)
    labels[np.arange(12), rng.integers(0, 8, 12)] = 1
    rep = component_ap(scores, labels, t, "IVT")
    per = [average_precision(scores[:, k], labels[:, k]) for k in range(8)]
    for k, want in enumerate(per):
        if want is None:
            assert math.isnan(rep.per_class[k])
        else:
            assert rep.per_class[k] == pytest.approx(want)


def test_component_ap_single_example_top_ranked():
    t = build_table((2, 2, 2), [(0, 0, 0), (1, 1, 1)])
    scores = np.array([[0.9, 0.1]])
    labels = np.array([[1, 0]])
    for d in ("I", "V", "T", "IV", "IT", "IVT"):
        rep = component_ap(scores, labels, t, d)
        assert rep.mean == 1.0


def test_component_ap_matches_bruteforce():
    rng = np.random.default_rng(21)
    rows = set()
    while len(rows) < 20:
        rows.add((int(rng.integers(4)), int(rng.integers(5)), int(rng.integers(6))))
    t = build_table((4, 5, 6), sorted(rows))
    scores = rng.random((20, 20))
    labels = (rng.random((20, 20)) < 0.15).astype(int)
    for d in ("I", "V", "T", "IV", "IT"):
        rep = component_ap(scores, labels, t, d)
        proj_scores, defined = component_logits(scores, t, d)
        proj_labels = project_labels(labels, t, d)
        vals = []
        for k in range(t.component_count(d)):
            if not defined[k]:
                assert math.isnan(rep.per_class[k])
                continue
            want = ap_oracle(list(proj_scores[:, k]), list(proj_labels[:, k]))
            if want is None:
                assert math.isnan(rep.per_class[k])
            else:
                assert rep.per_class[k] == pytest.approx(want, abs=1e-12)
                vals.append(want)
        if vals:
            assert rep.mean == pytest.approx(np.mean(vals))
            assert rep.n_scored == len(vals)


def test_mean_ap_ivt_excludes_empty_classes():
    scores = np.array([[0.9, 0.5], [0.1, 0.6]])
    labels = np.array([[1, 0], [0, 0]])  # class 1 has no positives
    assert mean_ap_ivt(scores, labels) == 1.0


def test_crossval_summary_trivial_and_two_point():
    out = crossval_summary({"ap": [1, 1, 1, 1, 1]})
    assert out["ap"] == (1.0, 0.0)
    mean, std = crossval_summary({"ap": [0.0, 1.0]})["ap"]
    assert mean == pytest.approx(0.5)
    assert std == pytest.approx(0.70710678, abs=1e-6)


def test_crossval_summary_matches_direct_formula():
    rng = np.random.default_rng(4)
    vals = rng.random(5)
    mean, std = crossval_summary({"m": vals})["m"]
    assert mean == pytest.approx(vals.sum() / 5)
    assert std == pytest.approx(math.sqrt(((vals - vals.mean()) ** 2).sum() / 4))


def test_crossval_summary_needs_two_folds():
    with pytest.raises(ValueError):
        crossval_summary({"m": [1.0]})


def test_format_mean_std():
    assert format_mean_std(0.212, 0.012) == "21.2 +- 1.2"
