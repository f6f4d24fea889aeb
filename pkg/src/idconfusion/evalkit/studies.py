"""Evaluation protocols built on the detector: similarity study, JPEG and budget sweeps, exports."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from ..core import IdConfusionError
from ..idmodel.backbone import embed_images
from .metrics import roc_report


class MissingCounterpart(IdConfusionError):
    def __init__(self, identity):
        self.identity = identity
        super().__init__(f"no real image of identity {identity!r}")


class CodecFailure(IdConfusionError):
    pass


GROUPS = ("same_id_real", "diff_id_real", "fake_vs_source", "fake_vs_target")


@dataclass
class PairSimilarityStudy:
    same_id_real: np.ndarray
    diff_id_real: np.ndarray
    fake_vs_source: np.ndarray
    fake_vs_target: np.ndarray

    def summary(self) -> dict:
        out = {}
        for g in GROUPS:
            v = getattr(self, g)
            sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            out[g] = {"n": int(len(v)), "mean": float(v.mean()), "std": sd, "se": sd / np.sqrt(max(len(v), 1))}
        return out


def _unit(z):
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def pair_similarity_study(extractor, manifest, images, n_pairs: int = 1000, seed: int = 0) -> PairSimilarityStudy:
    """Cosine similarities of four pair kinds: same-id reals, different-id reals,
    fake vs a real of its source, and fake vs a real of its target.

    Fakes are sampled with replacement; each fake gets independently drawn
    source and target reals.  Real pairs never pair an image with itself.
    """
    rng = np.random.default_rng(seed)
    reals = manifest.select(is_fake=False)
    fakes = manifest.select(is_fake=True)
    if not fakes:
        raise ValueError("manifest has no fake records")
    by_id = {}
    for i, r in enumerate(reals):
        by_id.setdefault(r.identity, []).append(i)
    for f in fakes:
        for ident in (f.source_id, f.target_id):
            if ident not in by_id:
                raise MissingCounterpart(ident)
    multi = [k for k, v in by_id.items() if len(v) >= 2]
    if not multi or len(by_id) < 2:
        raise ValueError("need an identity with two reals and at least two identities")
    fake_pick = rng.integers(0, len(fakes), size=n_pairs)
    needed_f = sorted(set(fake_pick.tolist()))
    src_pick = [by_id[fakes[i].source_id][rng.integers(len(by_id[fakes[i].source_id]))] for i in fake_pick]
    tgt_pick = [by_id[fakes[i].target_id][rng.integers(len(by_id[fakes[i].target_id]))] for i in fake_pick]
    same, diff = [], []
    ids = sorted(by_id)
    for _ in range(n_pairs):
        k = multi[rng.integers(len(multi))]
        a, b = rng.choice(by_id[k], size=2, replace=False)
        same.append((a, b))
        ka, kb = rng.choice(len(ids), size=2, replace=False)
        la, lb = by_id[ids[ka]], by_id[ids[kb]]
        diff.append((la[rng.integers(len(la))], lb[rng.integers(len(lb))]))
    needed_r = sorted(set(src_pick) | set(tgt_pick) | {i for p in same + diff for i in p})
    zr = dict(zip(needed_r, _unit(embed_images(extractor, np.stack([images.load(reals[i]) for i in needed_r])))))
    zf = dict(zip(needed_f, _unit(embed_images(extractor, np.stack([images.load(fakes[i]) for i in needed_f])))))
    cos = lambda u, v: float(np.clip(np.dot(u, v), -1.0, 1.0))
    return PairSimilarityStudy(
        same_id_real=np.array([cos(zr[a], zr[b]) for a, b in same]),
        diff_id_real=np.array([cos(zr[a], zr[b]) for a, b in diff]),
        fake_vs_source=np.array([cos(zf[f], zr[s]) for f, s in zip(fake_pick, src_pick)]),
        fake_vs_target=np.array([cos(zf[f], zr[t]) for f, t in zip(fake_pick, tgt_pick)]),
    )


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode a float HxWxC image as 8-bit JPEG at `quality` and decode it back."""
    from PIL import Image

    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality {quality} outside [1, 100]")
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    try:
        buf = io.BytesIO()
        Image.fromarray(arr.squeeze(-1) if arr.shape[-1] == 1 else arr).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        out = np.asarray(Image.open(buf).convert("L" if arr.shape[-1] == 1 else "RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise CodecFailure(f"JPEG round trip at quality {quality} failed: {exc}") from None
    return out.reshape(image.shape)


def jpeg_quality_sweep(detector, real_images, fake_images, qf_list=(90, 70, 50, 30, 20)) -> dict:
    """Re-encode copies of every test image at each quality factor and report ROC per QF.

    Returns an ordered dict keyed by QF, sorted from highest to lowest quality.
    """
    qfs = sorted({int(q) for q in qf_list}, reverse=True)
    for q in qfs:
        if not 1 <= q <= 100:
            raise ValueError(f"JPEG quality {q} outside [1, 100]")
    out = {}
    for q in qfs:
        r = np.stack([jpeg_roundtrip(x, q) for x in real_images])
        f = np.stack([jpeg_roundtrip(x, q) for x in fake_images])
        out[q] = roc_report(detector.scores(r), detector.scores(f))
    return out


def budget_sweep(
    detector,
    fake_images,
    real_images,
    objective,
    epsilons,
    references=None,
    iterations: int = 20,
    step_ratio: float = None,
    max_attacked: int = None,
    seed: int = 0,
) -> list:
    """ASR and distortion per L-inf budget, sharing one clean EER threshold.

    Step size scales with the budget: ``step_ratio * epsilon``, by default
    ``epsilon / iterations`` so the full path just spans the ball.  Coarser
    steps oscillate at large budgets.  Epsilon 0 is the unattacked baseline.
    """
    from ..evalkit.metrics import eer_from_scores
    from ..evasion import AttackBudget, measure_asr

    real_scores = detector.scores(np.asarray(real_images))
    fake_scores = detector.scores(np.asarray(fake_images))
    threshold, _ = eer_from_scores(real_scores, fake_scores)
    rows = []
    for eps in epsilons:
        eps = float(eps)
        if eps == 0.0:
            attack = lambda x, refs: x
            budget = None
        else:
            attack = objective
            ratio = step_ratio if step_ratio is not None else 1.0 / iterations
            budget = AttackBudget("inf", eps, iterations, ratio * eps)
        rep = measure_asr(
            detector, fake_images, real_images, attack, budget or AttackBudget(), references,
            max_attacked=max_attacked, seed=seed, threshold=threshold,
        )
        rows.append({
            "epsilon": eps,
            "asr": rep.asr,
            "n_attacked": rep.n_attacked,
            "mean_linf": float(rep.linf.mean()),
            "max_linf": float(rep.linf.max()),
            "mean_l2": float(rep.l2.mean()),
            "threshold": threshold,
        })
    return rows


def export_embeddings(extractor, records, images) -> list:
    """One row per record: sample id, fake flag, identity fields and the unit-norm embedding."""
    records = list(records)
    if not records:
        return []
    z = _unit(embed_images(extractor, np.stack([images.load(r) for r in records])))
    return [
        {
            "sample_id": r.sample_id,
            "is_fake": r.is_fake,
            "identity": r.identity or "",
            "source_id": r.source_id or "",
            "target_id": r.target_id or "",
            "embedding": z[i],
        }
        for i, r in enumerate(records)
    ]


def write_embeddings_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not rows:
            return
        d = len(rows[0]["embedding"])
        w.writerow(["sample_id", "is_fake", "identity", "source_id", "target_id"] + [f"z{i}" for i in range(d)])
        for row in rows:
            w.writerow([row["sample_id"], int(row["is_fake"]), row["identity"], row["source_id"], row["target_id"]]
                       + [repr(float(v)) for v in row["embedding"]])
