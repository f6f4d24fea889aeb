import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idconfusion.core import IdentitySet
from idconfusion.detector import (
    DetectionScore,
    DetectorEnsemble,
    SubsetSplitDetector,
    classify,
    ensemble_statistic,
    format_score_line,
    metric_values,
    score,
    split_identities,
)
from idconfusion.idmodel import IdProbDist


def test_score_examples():
    assert score(IdProbDist(np.array([0.05, 0.9, 0.05]))).value == pytest.approx(0.9)
    assert score(np.full(4, 0.25)).value == pytest.approx(0.25)
    assert score(np.array([1.0])).value == 1.0


def test_uniform_is_the_global_minimum_of_max_prob():
    k = 7
    assert score(np.full(k, 1 / k)).value == pytest.approx(1 / k)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 1.0), min_size=2, max_size=20))
def test_max_prob_bounds(raw):
    p = np.array(raw) / np.sum(raw)
    v = score(p).value
    assert 1 / len(p) - 1e-12 <= v <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-3, 1.0), min_size=3, max_size=12), st.floats(0.01, 0.9))
def test_mass_moved_away_from_top_lowers_the_score(raw, frac):
    p = np.array(raw) / np.sum(raw)
    top = int(np.argmax(p))
    q = p.copy()
    moved = frac * q[top] / 2
    q[top] -= moved
    others = [i for i in range(len(q)) if i != top]
    q[others] += moved / len(others)
    if np.max(q) == q[top]:
        assert score(q).value < score(p).value


def test_other_metrics_orientation():
    peaked, flat = np.array([0.97, 0.01, 0.01, 0.01]), np.full(4, 0.25)
    for m in ("neg_variance", "neg_entropy"):
        v = metric_values(np.stack([peaked, flat]), m)
        assert np.isfinite(v).all()
    assert metric_values(peaked[None], "neg_entropy")[0] > metric_values(flat[None], "neg_entropy")[0]
    with pytest.raises(ValueError):
        metric_values(flat[None], "median")


def test_invalid_distribution_rejected():
    with pytest.raises(ValueError):
        score(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        score(np.array([]))


def test_classify_tie_counts_as_real():
    assert classify(0.5, 0.5) == "real"
    assert classify(DetectionScore(0.49), 0.5) == "fake"
    assert format_score_line("a.png", "max", 0.25, 0.5) == "a.png,max,0.25,fake,0.5"


def test_ensemble_statistics():
    assert ensemble_statistic([0.9, 0.4, 0.7]) == 0.4
    assert ensemble_statistic([0.9, 0.4, 0.7], "neg_range") == pytest.approx(-0.5)
    assert ensemble_statistic([0.6], "neg_range") == 0.0
    with pytest.raises(ValueError):
        ensemble_statistic([])


class FixedModel:
    """Stand-in identification model returning stored distributions."""

    def __init__(self, labels, probs):
        self.identity_set = IdentitySet(tuple(labels))
        self.probs = np.asarray(probs, dtype=float)

    def predict_batch(self, images):
        return self.probs[: len(images)]

    def predict(self, image):
        return IdProbDist(self.probs[0])


def test_single_member_ensemble_equals_member():
    m = FixedModel("ab", [[0.8, 0.2], [0.4, 0.6]])
    ens = DetectorEnsemble([m])
    np.testing.assert_array_equal(ens.scores(np.zeros((2, 1))), [0.8, 0.6])


def test_ensemble_rejects_mismatched_sizes():
    with pytest.raises(ValueError):
        DetectorEnsemble([FixedModel("ab", [[1, 0]]), FixedModel("abc", [[1, 0, 0]])])


def test_subset_split_takes_group_maximum():
    g1 = FixedModel("ab", [[0.9, 0.1], [0.5, 0.5]])
    g2 = FixedModel("cd", [[0.6, 0.4], [0.3, 0.7]])
    split = SubsetSplitDetector([g1, g2])
    np.testing.assert_allclose(split.scores(np.zeros((2, 1))), [0.9, 0.7])
    assert split.labels == set("abcd")
    assert split.score_image(None).value == 0.9


def test_subset_split_requires_disjoint_groups():
    with pytest.raises(ValueError):
        SubsetSplitDetector([FixedModel("ab", [[1, 0]]), FixedModel("bc", [[1, 0]])])


def test_split_identities_partitions():
    labels = [f"id{i}" for i in range(11)]
    groups = split_identities(labels, 2, seed=0)
    assert sorted(sum(groups, [])) == sorted(labels)
    assert {len(g) for g in groups} == {5, 6}
    assert split_identities(labels, 2, seed=0) == groups
