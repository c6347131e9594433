"""Pooled-linear reference classifier over raw (visual, question) features.

Used as an oracle on the synthetic task: it must ace the recognition rule
(the tag survives capsule pooling) while sitting at chance on the
knowledge rule, whose answers live only in the knowledge matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression

from .synthetic import Instance


def pooled_features(instances: list[Instance]) -> np.ndarray:
    """Capsule-pooled visual features concatenated with pooled question words."""
    return np.stack([np.concatenate([inst.F.mean(axis=1), inst.Qhat.mean(axis=1)]) for inst in instances])


def fit_baseline(train: list[Instance]) -> LogisticRegression:
    x = pooled_features(train)
    y = np.array([inst.label for inst in train])
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x, y)
    return clf


def baseline_accuracy(clf: LogisticRegression, instances: list[Instance]) -> dict:
    """Overall and per-rule exact-match accuracy of the fitted baseline."""
    x = pooled_features(instances)
    y = np.array([inst.label for inst in instances])
    pred = clf.predict(x)
    out = {"overall": float((pred == y).mean()), "per_rule": {}}
    rules = np.array([inst.rule for inst in instances])
    for rule in sorted(set(rules)):
        mask = rules == rule
        out["per_rule"][rule] = float((pred[mask] == y[mask]).mean())
    return out


def chance_level(instances: list[Instance], rule: str | None = None) -> float:
    """Majority-class rate from the label marginals (optionally per rule)."""
    labels = [inst.label for inst in instances if rule is None or inst.rule == rule]
    if not labels:
        return 0.0
    _, counts = np.unique(labels, return_counts=True)
    return float(counts.max() / len(labels))
