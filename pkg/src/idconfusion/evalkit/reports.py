"""Report files: structured metrics with config hash and seed, ROC rows, score dumps, plots."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

SCORE_COLUMNS = ("sample_id", "metric", "value", "verdict", "threshold")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_report(path, metrics: dict, config: dict, seed) -> dict:
    payload = {"config_hash": config_hash(config), "seed": seed, "metrics": _plain(metrics)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def write_roc_csv(path, report) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("threshold,fpr,tpr\n")
        for row in report.rows():
            fh.write(row + "\n")


def write_scores(path, sample_ids, metric: str, values, threshold: float) -> None:
    from ..detector import classify

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for sid, v in zip(sample_ids, values):
            w.writerow([sid, metric, repr(float(v)), classify(float(v), threshold), repr(float(threshold))])


def read_scores(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(SCORE_COLUMNS) - set(rows[0]):
        raise ValueError(f"{path}: score dump needs columns {SCORE_COLUMNS}")
    for r in rows:
        r["value"] = float(r["value"])
        r["threshold"] = float(r["threshold"])
    return rows


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_roc(curves: dict, path) -> None:
    """`curves` maps a label to a RocReport."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    for label, rep in curves.items():
        ax.plot(rep.fpr, rep.tpr, label=f"{label} (AUC {100 * rep.auc:.2f})")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.5, ls="--")
    ax.set_xlabel("false positive rate (fakes called real)")
    ax.set_ylabel("true positive rate (reals called real)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_budget_sweep(rows, path) -> None:
    plt = _pyplot()
    eps = [255 * r["epsilon"] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(eps, [100 * r["asr"] for r in rows], marker="o")
    ax.set_xlabel("L-inf budget (x/255)")
    ax.set_ylabel("ASR (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_asr(asr_by_name: dict, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(asr_by_name)
    ax.bar(range(len(names)), [100 * asr_by_name[n] for n in names])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("ASR (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_score_hist(real, fake, path, threshold=None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    bins = np.linspace(min(np.min(real), np.min(fake)), max(np.max(real), np.max(fake)), 40)
    ax.hist(real, bins=bins, alpha=0.6, label="real")
    ax.hist(fake, bins=bins, alpha=0.6, label="fake")
    if threshold is not None and np.isfinite(threshold):
        ax.axvline(threshold, color="k", lw=1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
