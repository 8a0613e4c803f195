"""Objective evaluation metrics and linear factor probes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted, check_X_y

REPORT_SCHEMA_VERSION = 1


class MetricError(ValueError):
    pass


def confusion_counts(clusters, labels) -> np.ndarray:
    """Contingency matrix ``n[k][j]``: items in cluster ``k`` with label ``j``."""
    clusters = np.asarray(clusters)
    labels = np.asarray(labels)
    if clusters.shape != labels.shape or clusters.size == 0:
        raise MetricError("clusters and labels must be non-empty and aligned")
    _, ci = np.unique(clusters, return_inverse=True)
    _, li = np.unique(labels, return_inverse=True)
    counts = np.zeros((ci.max() + 1, li.max() + 1), dtype=np.int64)
    np.add.at(counts, (ci, li), 1)
    return counts


def _check_counts(counts) -> np.ndarray:
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 2 or n.size == 0 or n.sum() < 1:
        raise MetricError("empty confusion counts")
    if np.any(n < 0):
        raise MetricError("confusion counts must be non-negative")
    return n


def cluster_purity(counts) -> float:
    n = _check_counts(counts)
    return float(n.max(axis=1).sum() / n.sum())


def pnmi(counts) -> float:
    """I(label; cluster) / H(label), natural logs, 0 log 0 = 0."""
    n = _check_counts(counts)
    joint = n / n.sum()
    p_cluster = joint.sum(axis=1, keepdims=True)
    p_label = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (p_cluster @ p_label)[nz])).sum())
    pl = p_label[p_label > 0]
    h_label = float(-(pl * np.log(pl)).sum())
    if h_label <= 0:
        raise MetricError("PNMI is undefined for single-label data")
    return max(0.0, mi / h_label)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def edit_distance(hyp, ref) -> int:
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def phoneme_error_rate(hyp, ref) -> float:
    if len(ref) == 0:
        raise MetricError("reference sequence is empty")
    return edit_distance(hyp, ref) / len(ref)


def _resample(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) == n:
        return x
    return np.interp(np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, len(x)), x)


def pitch_contour_correlation(f0_a, f0_b) -> float:
    """Pearson correlation after linear resampling to the shorter length."""
    a = np.asarray(f0_a, dtype=np.float64).ravel()
    b = np.asarray(f0_b, dtype=np.float64).ravel()
    n = min(len(a), len(b))
    if n < 4:
        raise MetricError("contours need at least 4 points")
    a, b = _resample(a, n), _resample(b, n)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise MetricError("correlation undefined for a constant contour")
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Linear softmax probe on frozen features (standardised inputs)."""

    def __init__(self, C: float = 1.0, max_iter: int = 500):
        self.C = C
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if len(np.unique(y)) < 2:
            raise MetricError("probe needs at least two classes")
        self.scaler_ = StandardScaler().fit(X)
        self.model_ = LogisticRegression(C=self.C, max_iter=self.max_iter)
        self.model_.fit(self.scaler_.transform(X), y)
        self.classes_ = self.model_.classes_
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(self.scaler_.transform(np.asarray(X, dtype=np.float64)))

    def embed(self, X) -> np.ndarray:
        """Pre-softmax activations, used as the verification embedding."""
        return self.decision_function(X)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(self.scaler_.transform(np.asarray(X, dtype=np.float64)))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(self.scaler_.transform(np.asarray(X, dtype=np.float64)))

    def predict_groups(self, X, groups) -> np.ndarray:
        """One label per group by summing frame log-probabilities."""
        logp = np.log(np.clip(self.predict_proba(X), 1e-300, None))
        groups = np.asarray(groups)
        keys = np.unique(groups)
        return np.array([self.classes_[np.argmax(logp[groups == g].sum(axis=0))] for g in keys])


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    probe: ProbeClassifier


def probe_accuracy(features, labels, train_mask, C: float = 1.0) -> ProbeResult:
    """Train on ``train_mask`` rows, score on the rest; chance = majority-class rate."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    train_mask = np.asarray(train_mask, dtype=bool)
    if train_mask.all() or not train_mask.any():
        raise MetricError("probe splits must both be non-empty")
    if len(np.unique(y[train_mask])) < 2:
        raise MetricError("probe training split has a single class")
    probe = ProbeClassifier(C=C).fit(X[train_mask], y[train_mask])
    held = ~train_mask
    acc = float(np.mean(probe.predict(X[held]) == y[held]))
    _, counts = np.unique(y[held], return_counts=True)
    chance = float(max(counts.max() / held.sum(), 1.0 / len(np.unique(y))))
    return ProbeResult(acc, chance, probe)


@dataclass
class MetricReport:
    metrics: dict[str, float] = field(default_factory=dict)
    splits: dict[str, str] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value: float, split: str) -> None:
        self.metrics[name] = float(value)
        self.splits[name] = split

    def to_text(self) -> str:
        lines = [f"schema_version={REPORT_SCHEMA_VERSION}"]
        lines += [f"meta.{k}={v}" for k, v in sorted(self.metadata.items())]
        lines += [f"{k}[{self.splits[k]}]={self.metrics[k]:.6f}" for k in sorted(self.metrics)]
        return "\n".join(lines) + "\n"

    def csv_header(self) -> list[str]:
        return ["schema_version"] + sorted(self.metadata) + sorted(self.metrics)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.csv_header())
        writer.writerow([REPORT_SCHEMA_VERSION] + [self.metadata[k] for k in sorted(self.metadata)]
                        + [f"{self.metrics[k]:.6f}" for k in sorted(self.metrics)])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        report = cls()
        for line in text.splitlines():
            key, _, value = line.partition("=")
            if key == "schema_version":
                if int(value) != REPORT_SCHEMA_VERSION:
                    raise MetricError(f"unsupported report schema {value}")
            elif key.startswith("meta."):
                report.metadata[key[5:]] = value
            elif key:
                name, _, split = key.partition("[")
                report.add(name, float(value), split.rstrip("]"))
        return report
