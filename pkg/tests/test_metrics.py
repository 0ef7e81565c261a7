import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocgan.metrics import roc_auc, roc_points


def pair_counting_auc(scores, labels) -> float:
    """O(n^2) Mann-Whitney oracle: wins plus half ties over all cross-class pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                credit += 1.0
            elif p == n:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def random_instance(rng: np.random.Generator, n_max: int = 300):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse rounding injects plenty of ties
    scores = np.round(rng.normal(size=n) + 0.5 * labels, int(rng.integers(0, 3)))
    return scores.tolist(), labels.tolist()


def test_perfect_separation():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_all_ties():
    assert roc_auc([3.0] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_inverted():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_matches_oracle_exactly_200():
    rng = np.random.default_rng(200)
    scores = rng.random(200).tolist()
    labels = rng.integers(0, 2, 200).tolist()
    assert roc_auc(scores, labels) == pair_counting_auc(scores, labels)


def test_matches_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, y = random_instance(rng)
        assert roc_auc(s, y) == pair_counting_auc(s, y)


@pytest.mark.parametrize(
    "scores,labels", [([1.0, 2.0], [1, 1]), ([1.0], [0]), ([1.0, 2.0], [0, 1, 1]), ([1.0, 2.0], [0, 2])]
)
def test_errors(scores, labels):
    with pytest.raises(ValueError):
        roc_auc(scores, labels)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_reversal_without_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 100))
    s = rng.normal(size=n)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    assert roc_auc(s, y) == pytest.approx(1.0 - roc_auc(-s, y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s, y = random_instance(rng, 120)
    s = np.asarray(s)
    base = roc_auc(s, y)
    assert roc_auc(np.exp(s / 4), y) == base
    assert roc_auc(3.0 * s + 7.0, y) == base


def test_roc_points_area_matches_auc():
    rng = np.random.default_rng(5)
    s, y = random_instance(rng, 150)
    pts = roc_points(s, y)
    assert pts[0] == (0.0, 0.0, math.inf)
    assert pts[-1][:2] == (1.0, 1.0)
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    # trapezoids over the exact vertex set reproduce the rank statistic
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    assert area == pytest.approx(roc_auc(s, y), abs=1e-12)
