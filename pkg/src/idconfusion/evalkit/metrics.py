"""AUC, EER threshold and ROC curves under the "lower score means fake" convention.

Reals are the positive class: a threshold ``t`` calls a sample real when
``score >= t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import IdConfusionError
from .. import kernels


class SingleClassOnly(IdConfusionError, ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    is_fake: bool
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"{self.sample_id}: score must be finite")


@dataclass
class RocReport:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    eer_threshold: float
    eer: float

    def rows(self):
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            yield f"{t!r},{f!r},{p!r}"

    def summary(self) -> dict:
        return {"auc": self.auc, "eer": self.eer, "eer_threshold": self.eer_threshold}


def split_scores(samples):
    """(real_scores, fake_scores) from ScoredSample objects or (is_fake, score) pairs."""
    real, fake = [], []
    for s in samples:
        is_fake, value = (s.is_fake, s.score) if isinstance(s, ScoredSample) else s
        (fake if is_fake else real).append(float(value))
    return np.asarray(real), np.asarray(fake)


def _arrays(real, fake):
    real = np.asarray(real, dtype=np.float64).ravel()
    fake = np.asarray(fake, dtype=np.float64).ravel()
    if real.size == 0 or fake.size == 0:
        raise SingleClassOnly(f"need both classes, got {real.size} real and {fake.size} fake")
    return real, fake


def auc_from_scores(real, fake) -> float:
    return kernels.rank_auc(*_arrays(real, fake))


def compute_auc(samples) -> float:
    """Probability that a random real outscores a random fake, ties counted one half."""
    return auc_from_scores(*split_scores(samples))


def eer_from_scores(real, fake):
    thr, fpr, fnr, best = kernels.eer_scan(*_arrays(real, fake))
    return float(thr[best]), float((fpr[best] + fnr[best]) / 2.0)


def compute_eer_threshold(samples):
    """``(threshold, eer)`` minimizing |FPR - FNR| over midpoints of adjacent distinct scores and +-inf.

    The reported EER is the mean of FPR and FNR at that threshold.
    """
    return eer_from_scores(*split_scores(samples))


def roc_report(real, fake) -> RocReport:
    real, fake = _arrays(real, fake)
    thr, fpr, fnr, best = kernels.eer_scan(real, fake)
    return RocReport(
        thresholds=thr,
        tpr=1.0 - fnr,
        fpr=fpr,
        auc=kernels.rank_auc(real, fake),
        eer_threshold=float(thr[best]),
        eer=float((fpr[best] + fnr[best]) / 2.0),
    )
