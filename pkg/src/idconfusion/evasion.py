"""Grey-box evasion attacks on the max-probability detector and the ASR protocol.

Attacks are basic iterative method (BIM) runs: signed-gradient steps,
projected after every step onto the epsilon-ball around the original fake
and onto the [0, 1] pixel box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import IdConfusionError
from .evalkit.metrics import eer_from_scores
from .idmodel.backbone import to_tensor

DEFAULT_EPSILON = 4 / 255
DEFAULT_STEP = 1 / 255


class NonDifferentiableObjective(IdConfusionError):
    pass


class NoCorrectlyDetectedFakes(IdConfusionError):
    pass


class ZeroVector(IdConfusionError, ValueError):
    pass


def parse_fraction(text) -> float:
    """'4/255' -> 4/255 exactly as a float; plain numbers pass through."""
    if isinstance(text, (int, float)):
        return float(text)
    return float(Fraction(str(text).strip()))


@dataclass(frozen=True)
class AttackBudget:
    norm_order: str = "inf"
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 20
    step_size: Optional[float] = None

    def __post_init__(self):
        if self.norm_order not in ("inf", "2"):
            raise ValueError("norm_order must be 'inf' or '2'")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("at least one iteration is required")
        step = min(DEFAULT_STEP, self.epsilon) if self.step_size is None else self.step_size
        if step <= 0 or step > self.epsilon:
            raise ValueError("step size must lie in (0, epsilon]")
        object.__setattr__(self, "step_size", float(step))

    def to_dict(self) -> dict:
        return {"norm_order": self.norm_order, "epsilon": self.epsilon, "iterations": self.iterations,
                "step_size": self.step_size}


OBJECTIVE_KINDS = ("max_prob", "embed_distance", "ensemble_embed")


@dataclass
class AttackObjective:
    """What the manipulator optimizes.

    ``max_prob`` ascends the surrogate's maximum softmax probability;
    ``embed_distance`` / ``ensemble_embed`` descend the (summed) cosine
    distance between the perturbed fake and a real reference image of the
    source identity under one or several extractors.
    """

    kind: str
    surrogate: object = None
    extractors: Sequence = ()
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == "max_prob" and self.surrogate is None:
            raise ValueError("max_prob objective needs a surrogate identification model")
        if self.kind == "embed_distance" and len(self.extractors) != 1:
            raise ValueError("embed_distance takes exactly one extractor")
        if self.kind == "ensemble_embed" and len(self.extractors) < 1:
            raise ValueError("ensemble_embed needs at least one extractor")

    @property
    def ascent(self) -> bool:
        return self.kind == "max_prob"

    @property
    def needs_reference(self) -> bool:
        return self.kind != "max_prob"

    def with_reference(self, reference) -> "AttackObjective":
        return AttackObjective(self.kind, self.surrogate, tuple(self.extractors), reference)

    def modules(self):
        return [self.surrogate] if self.kind == "max_prob" else list(self.extractors)

    def build(self, batch_refs=None) -> Callable:
        """Per-sample objective f(x) for NCHW float64 tensors."""
        if self.kind == "max_prob":
            model = self.surrogate
            dtype = next(model.parameters()).dtype

            def f(x):
                return torch.softmax(model(x.to(dtype)), dim=1).max(dim=1).values.double()

            return f
        refs = self.reference if batch_refs is None else batch_refs
        if refs is None:
            raise ValueError("embedding objectives need reference real images")
        targets = []
        for z in self.extractors:
            dtype = next(z.parameters()).dtype
            with torch.no_grad():
                targets.append(F.normalize(z(to_tensor(refs, dtype)), dim=1))

        def f(x):
            total = 0.0
            for z, t in zip(self.extractors, targets):
                e = F.normalize(z(x.to(t.dtype)), dim=1)
                total = total + (1.0 - (e * t).sum(dim=1)).double()
            return total

        return f


def _embedding(z, image) -> np.ndarray:
    dtype = next(z.parameters()).dtype
    with torch.no_grad():
        out = z.features(to_tensor(image, dtype)) if hasattr(z, "features") else z(to_tensor(image, dtype))
    return out.double().numpy()[0]


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine distance of a zero embedding is undefined")
    return float(1.0 - np.dot(u / nu, v / nv))


def embed_distance(z, x_a, x_b) -> float:
    """Cosine distance 1 - <z(x_a), z(x_b)> after unit normalization."""
    return cosine_distance(_embedding(z, x_a), _embedding(z, x_b))


def ensemble_objective(extractors, x, x_r) -> float:
    if not extractors:
        raise ValueError("need at least one extractor")
    return float(sum(embed_distance(z, x, x_r) for z in extractors))


@dataclass
class AttackResult:
    adversarial_image: np.ndarray  # best-objective iterate
    final_image: np.ndarray
    objective_trace: np.ndarray  # value at the start and after each step
    linf_norm_of_delta: float
    l2_norm_of_delta: float = 0.0


def _project(x, x0, budget: AttackBudget):
    if budget.norm_order == "inf":
        x = torch.max(torch.min(x, x0 + budget.epsilon), x0 - budget.epsilon)
    else:
        d = x - x0
        n = d.flatten(1).norm(dim=1).clamp_min(1e-30)
        factor = torch.clamp(budget.epsilon / n, max=1.0)
        x = x0 + d * factor.view(-1, *([1] * (d.dim() - 1)))
    return x.clamp(0.0, 1.0)


def bim_batch(x_f: np.ndarray, objective: AttackObjective, budget: AttackBudget, references=None) -> dict:
    """BIM on an NHWC batch.  Returns best/final iterates, traces and distortion norms."""
    x0 = to_tensor(x_f, torch.float64)
    f = objective.build(references)
    sign = 1.0 if objective.ascent else -1.0
    for m in objective.modules():
        m.eval()
    x = x0.clone()
    n = x.shape[0]
    trace = np.zeros((n, budget.iterations + 1))
    best = x0.clone()
    best_val = None
    for t in range(budget.iterations + 1):
        x_req = x.detach().requires_grad_(True)
        val = f(x_req)
        if not val.requires_grad:
            raise NonDifferentiableObjective("objective has no gradient with respect to the input")
        v = val.detach()
        trace[:, t] = v.numpy()
        better = torch.ones(n, dtype=torch.bool) if best_val is None else (sign * v > sign * best_val)
        best[better] = x[better]
        best_val = v.clone() if best_val is None else torch.where(better, v, best_val)
        if t == budget.iterations:
            break
        (grad,) = torch.autograd.grad(val.sum(), x_req)
        if budget.norm_order == "inf":
            step = grad.sign()
        else:
            step = grad / grad.flatten(1).norm(dim=1).clamp_min(1e-30).view(-1, 1, 1, 1)
        x = _project(x.detach() + sign * budget.step_size * step, x0, budget)
    to_np = lambda t: t.detach().numpy().transpose(0, 2, 3, 1)
    delta = (best - x0).flatten(1)
    return {
        "best": to_np(best),
        "final": to_np(x),
        "trace": trace,
        "linf": delta.abs().max(dim=1).values.numpy(),
        "l2": delta.norm(dim=1).numpy(),
    }


def bim_attack(x_f, objective: AttackObjective, budget: AttackBudget = AttackBudget()) -> AttackResult:
    x_f = np.asarray(x_f, dtype=np.float64)
    refs = None if objective.reference is None else np.asarray(objective.reference)[None]
    out = bim_batch(x_f[None], objective, budget, refs)
    return AttackResult(out["best"][0], out["final"][0], out["trace"][0], float(out["linf"][0]), float(out["l2"][0]))


@dataclass
class AsrReport:
    threshold: float
    n_attacked: int
    n_evaded: int
    asr: float
    pre_scores: np.ndarray
    post_scores: np.ndarray
    sample_ids: list = field(default_factory=list)
    budget: dict = field(default_factory=dict)
    linf: np.ndarray = None
    l2: np.ndarray = None

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_attacked": self.n_attacked,
            "n_evaded": self.n_evaded,
            "asr": self.asr,
            "budget": self.budget,
            "samples": [
                {"sample_id": sid, "pre": float(a), "post": float(b)}
                for sid, a, b in zip(self.sample_ids, self.pre_scores, self.post_scores)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def measure_asr(
    detector,
    fake_images: np.ndarray,
    real_images: np.ndarray,
    objective,
    budget: AttackBudget = AttackBudget(),
    references: np.ndarray = None,
    sample_ids=None,
    max_attacked: int = None,
    seed: int = 0,
    batch_size: int = 64,
    threshold: float = None,
) -> AsrReport:
    """Attack the correctly detected fakes and count how many cross the clean EER threshold.

    `objective` is an AttackObjective (references aligned with `fake_images`
    for embedding objectives) or any callable ``(x_batch, ref_batch) ->
    x_adv_batch``.  `max_attacked` caps the attacked set with a seeded random
    subsample; the EER threshold always uses every clean score.
    """
    fake_images = np.asarray(fake_images)
    fake_scores = detector.scores(fake_images)
    if threshold is None:
        real_scores = detector.scores(np.asarray(real_images))
        threshold, _ = eer_from_scores(real_scores, fake_scores)
    detected = np.flatnonzero(fake_scores < threshold)
    if detected.size == 0:
        raise NoCorrectlyDetectedFakes("no fake image is detected at the EER threshold")
    if max_attacked is not None and detected.size > max_attacked:
        rng = np.random.default_rng(seed)
        detected = np.sort(rng.choice(detected, size=max_attacked, replace=False))
    post = np.empty(detected.size)
    linf = np.empty(detected.size)
    l2 = np.empty(detected.size)
    for s in range(0, detected.size, batch_size):
        idx = detected[s : s + batch_size]
        refs = None if references is None else np.asarray(references)[idx]
        if isinstance(objective, AttackObjective):
            adv = bim_batch(fake_images[idx], objective, budget, refs)["best"]
        else:
            adv = np.asarray(objective(fake_images[idx], refs), dtype=np.float64)
        post[s : s + len(idx)] = detector.scores(adv)
        d = (adv - fake_images[idx].astype(np.float64)).reshape(len(idx), -1)
        linf[s : s + len(idx)] = np.abs(d).max(axis=1)
        l2[s : s + len(idx)] = np.linalg.norm(d, axis=1)
    evaded = int((post > threshold).sum())
    ids = [sample_ids[i] for i in detected] if sample_ids is not None else [str(i) for i in detected]
    return AsrReport(
        threshold=float(threshold),
        n_attacked=int(detected.size),
        n_evaded=evaded,
        asr=evaded / detected.size,
        pre_scores=fake_scores[detected],
        post_scores=post,
        sample_ids=ids,
        budget=budget.to_dict(),
        linf=linf,
        l2=l2,
    )


def train_adaptive_surrogate(manipulator_ids, train, backbone, cfg=None, seed: int = 0, images=None, stats=None):
    """Attention-finetuned surrogate over the manipulator's identity subset."""
    from .idmodel.training import TrainConfig, finetune_attention

    ids = train.identity_set.subset(manipulator_ids)
    if len(ids) != len(set(manipulator_ids)):
        raise ValueError("manipulator identities must belong to the manifest's identity set")
    keep = [r for r in train.records if not r.is_fake and r.identity in ids]
    sub = train.with_records(keep, ids)
    return finetune_attention(sub, backbone, cfg or TrainConfig.finetune(), seed, images=images, stats=stats)
