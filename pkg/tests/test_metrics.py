import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlingtts.metrics import (
    MetricError,
    MetricReport,
    ProbeClassifier,
    cluster_purity,
    confusion_counts,
    cosine_similarity,
    edit_distance,
    phoneme_error_rate,
    pitch_contour_correlation,
    pnmi,
    probe_accuracy,
)


def alignment_distance(hyp, ref):
    """Minimum over alignments, written as an exhaustive recursion over the three moves."""
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(hyp):
            return len(ref) - j
        if j == len(ref):
            return len(hyp) - i
        return min(go(i + 1, j + 1) + (hyp[i] != ref[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)
    return go(0, 0)


def entropy(p):
    p = np.asarray(p, dtype=float).ravel()
    return -sum(x * math.log(x) for x in p if x > 0)


def test_purity_examples():
    assert cluster_purity(np.diag([3, 4, 5])) == 1.0
    assert cluster_purity([[5, 1], [2, 4]]) == pytest.approx(0.75)
    assert cluster_purity([[2, 2, 2, 2]]) == pytest.approx(0.25)
    with pytest.raises(MetricError):
        cluster_purity(np.zeros((2, 2)))
    with pytest.raises(MetricError):
        cluster_purity([[1, -1]])


def test_pnmi_examples():
    assert pnmi(np.diag([3, 4, 5])) == pytest.approx(1.0)
    assert pnmi([[2, 2], [4, 4]]) == pytest.approx(0.0, abs=1e-12)
    assert pnmi([[2, 1], [1, 2]]) == pytest.approx(0.0817, abs=1e-4)
    with pytest.raises(MetricError):
        pnmi([[3], [4]])


def test_pnmi_matches_entropy_identity(rng):
    counts = rng.integers(0, 9, size=(5, 4))
    p = counts / counts.sum()
    mi = entropy(p.sum(0)) + entropy(p.sum(1)) - entropy(p)
    assert pnmi(counts) == pytest.approx(mi / entropy(p.sum(0)), abs=1e-12)


def test_pnmi_independent_partitions_small(rng):
    clusters = rng.integers(0, 10, 20000)
    labels = rng.integers(0, 10, 20000)
    assert pnmi(confusion_counts(clusters, labels)) < 0.05


def test_permutation_invariance(rng):
    counts = rng.integers(0, 9, size=(6, 4))
    perm = rng.permutation(6)
    assert cluster_purity(counts[perm]) == pytest.approx(cluster_purity(counts))
    assert pnmi(counts[perm]) == pytest.approx(pnmi(counts))


def test_confusion_counts():
    counts = confusion_counts([0, 0, 1, 1, 1], ["a", "b", "b", "b", "a"])
    assert counts.tolist() == [[1, 1], [1, 2]]
    with pytest.raises(MetricError):
        confusion_counts([0, 1], [0])


def test_cosine_examples():
    assert cosine_similarity([1, 2], [2, 1]) == pytest.approx(0.8)
    assert cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 2]) == 0.0
    with pytest.raises(MetricError):
        cosine_similarity([0, 0], [1, 1])


def test_per_examples():
    ref = list(range(10))
    assert phoneme_error_rate(ref, ref) == 0.0
    assert phoneme_error_rate(ref[:9] + [42], ref) == pytest.approx(0.1)
    assert edit_distance("abc", "acd") == 2
    assert phoneme_error_rate("abc", "acd") == pytest.approx(2 / 3)
    assert phoneme_error_rate([1, 2], [1, 2, 3, 4]) != phoneme_error_rate([1, 2, 3, 4], [1, 2])
    with pytest.raises(MetricError):
        phoneme_error_rate([1], [])


def test_per_agrees_with_exhaustive_alignment():
    rng = np.random.default_rng(99)
    for _ in range(100):
        hyp = tuple(rng.integers(0, 4, rng.integers(0, 9)))
        ref = tuple(rng.integers(0, 4, rng.integers(1, 9)))
        assert edit_distance(hyp, ref) == alignment_distance(hyp, ref)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=8), st.lists(st.integers(0, 5), min_size=1, max_size=8))
def test_per_zero_iff_identical(hyp, ref):
    assert (phoneme_error_rate(hyp, ref) == 0) == (hyp == ref)


def test_pitch_correlation_examples(rng):
    x = rng.normal(size=20)
    assert pitch_contour_correlation(x, x) == pytest.approx(1.0)
    assert pitch_contour_correlation(x, -x) == pytest.approx(-1.0)
    assert pitch_contour_correlation([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0)
    long = np.linspace(0, 1, 40) ** 2
    assert pitch_contour_correlation(long, np.linspace(0, 1, 10) ** 2) > 0.99
    with pytest.raises(MetricError):
        pitch_contour_correlation([1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(MetricError):
        pitch_contour_correlation([1, 2, 3], [1, 2, 3])


def test_probe_examples(rng):
    X = rng.normal(size=(300, 5))
    y = (X[:, 2] > 0).astype(int)
    split = np.arange(300) < 200
    assert probe_accuracy(X, y, split).accuracy > 0.95
    noise = rng.integers(0, 3, 300)
    res = probe_accuracy(X, noise, split)
    assert abs(res.accuracy - 1 / 3) < 0.1
    assert res.chance >= 1 / 3
    with pytest.raises(MetricError):
        probe_accuracy(X, y, np.ones(300, dtype=bool))
    with pytest.raises(MetricError):
        probe_accuracy(X, np.zeros(300, dtype=int), split)


def test_probe_classifier_estimator_api(rng):
    X = rng.normal(size=(60, 3))
    y = (X[:, 0] > 0).astype(int)
    probe = ProbeClassifier(C=0.5).fit(X, y)
    assert probe.get_params()["C"] == 0.5
    assert probe.embed(X).shape == (60,)
    groups = np.repeat(np.arange(6), 10)
    assert probe.predict_groups(X, groups).shape == (6,)
    with pytest.raises(ValueError):
        ProbeClassifier().fit(X, y[:-1])


def test_metric_report_roundtrip():
    report = MetricReport()
    report.metadata.update(config_hash="abc", seed="0")
    report.add("per_C", 0.25, "test-cross-lingual")
    report.add("per_W", 0.125, "test-within-lingual")
    text = report.to_text()
    back = MetricReport.from_text(text)
    assert back.metrics == report.metrics and back.splits == report.splits
    assert back.metadata == report.metadata
    header, row = report.to_csv().splitlines()
    assert header.split(",")[0] == "schema_version" and len(row.split(",")) == len(header.split(","))
    with pytest.raises(MetricError):
        MetricReport.from_text("schema_version=99\n")


def test_metrics_are_pure(rng):
    counts = rng.integers(0, 9, size=(4, 4))
    before = counts.copy()
    assert pnmi(counts) == pnmi(counts)
    assert np.array_equal(counts, before)
