"""Face-swap detection scores from identification probability distributions.

Every score follows one orientation: lower means more likely fake.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

METRICS = ("max", "neg_variance", "neg_entropy")
ENSEMBLE_STATISTICS = ("min", "neg_range")


@dataclass(frozen=True)
class DetectionScore:
    value: float
    metric: str = "max"


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty probability vector")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("not a probability distribution")
    return p


def metric_values(probs: np.ndarray, metric: str = "max") -> np.ndarray:
    """Vectorized scores for an (N, K) array of distributions."""
    p = np.asarray(probs, dtype=np.float64)
    if metric == "max":
        return p.max(axis=-1)
    if metric == "neg_variance":
        return -p.var(axis=-1)
    if metric == "neg_entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        return plogp.sum(axis=-1)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def score(dist, metric: str = "max") -> DetectionScore:
    """Score one distribution; accepts an IdProbDist or a plain probability vector."""
    p = _check_probs(getattr(dist, "probs", dist))
    return DetectionScore(float(metric_values(p, metric)), metric)


def classify(s, threshold: float) -> str:
    """'fake' iff the score is strictly below the threshold; a tie is 'real'."""
    value = s.value if isinstance(s, DetectionScore) else float(s)
    return "fake" if value < threshold else "real"


def ensemble_statistic(values: Sequence[float], statistic: str = "min") -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("ensemble needs at least one model")
    if statistic == "min":
        return float(v.min())
    if statistic == "neg_range":
        return float(-(v.max() - v.min()))
    raise ValueError(f"unknown ensemble statistic {statistic!r}")


class Detector:
    """A single identification model plus the metric used to turn it into scores."""

    def __init__(self, model, metric: str = "max"):
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        self.model = model
        self.metric = metric

    def scores(self, images) -> np.ndarray:
        return metric_values(self.model.predict_batch(images), self.metric)

    def score_image(self, image) -> DetectionScore:
        return score(self.model.predict(image), self.metric)

    def score_tensor(self, x):
        """Differentiable max-prob score for an NCHW tensor (used by attacks)."""
        import torch

        return torch.softmax(self.model(x), dim=1).max(dim=1).values


class DetectorEnsemble:
    """M identification models over one identity set, combined by min or negated range."""

    def __init__(self, models, statistic: str = "min"):
        models = list(models)
        if not models:
            raise ValueError("ensemble needs at least one model")
        ks = {m.identity_set.K for m in models}
        if len(ks) != 1:
            raise ValueError("all ensemble members must share the identity set size")
        if statistic not in ENSEMBLE_STATISTICS:
            raise ValueError(f"unknown ensemble statistic {statistic!r}")
        self.models = models
        self.statistic = statistic

    def member_values(self, images) -> np.ndarray:
        return np.stack([m.predict_batch(images).max(axis=1) for m in self.models], axis=1)

    def scores(self, images) -> np.ndarray:
        v = self.member_values(images)
        if self.statistic == "min":
            return v.min(axis=1)
        return -(v.max(axis=1) - v.min(axis=1))

    def score_image(self, image) -> DetectionScore:
        v = [float(m.predict(image).probs.max()) for m in self.models]
        return DetectionScore(ensemble_statistic(v, self.statistic), f"ensemble_{self.statistic}")


def ensemble_score(ensemble: DetectorEnsemble, image) -> DetectionScore:
    return ensemble.score_image(image)


class SubsetSplitDetector:
    """Models over disjoint identity groups; the image score is the largest group max-prob."""

    def __init__(self, group_models):
        group_models = list(group_models)
        if not group_models:
            raise ValueError("need at least one group model")
        seen = set()
        for m in group_models:
            labels = set(m.identity_set.labels)
            if labels & seen:
                raise ValueError("identity groups must be disjoint")
            seen |= labels
        self.group_models = group_models

    @property
    def labels(self) -> set:
        return {lab for m in self.group_models for lab in m.identity_set.labels}

    def scores(self, images) -> np.ndarray:
        return np.stack([m.predict_batch(images).max(axis=1) for m in self.group_models], axis=1).max(axis=1)

    def score_image(self, image) -> DetectionScore:
        return DetectionScore(max(float(m.predict(image).probs.max()) for m in self.group_models), "max")


def subset_split_score(split: SubsetSplitDetector, image) -> DetectionScore:
    return split.score_image(image)


def split_identities(labels: Sequence[str], n_groups: int, seed: int) -> list:
    """Randomly partition identity labels into `n_groups` near-equal groups."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labels))
    return [sorted(labels[i] for i in chunk) for chunk in np.array_split(perm, n_groups)]


def format_score_line(sample_id: str, metric: str, value: float, threshold: float) -> str:
    return f"{sample_id},{metric},{value!r},{classify(value, threshold)},{threshold!r}"
