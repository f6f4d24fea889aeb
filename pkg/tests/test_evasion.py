import itertools

import numpy as np
import pytest
import torch

from idconfusion import synthfaces as sf
from idconfusion.core import IdentitySet
from idconfusion.evasion import (
    AttackBudget,
    AttackObjective,
    NoCorrectlyDetectedFakes,
    ZeroVector,
    bim_attack,
    bim_batch,
    cosine_distance,
    embed_distance,
    ensemble_objective,
    measure_asr,
    parse_fraction,
    train_adaptive_surrogate,
)
from idconfusion.idmodel import BackboneSpec, EmbeddingBackend, IdentificationModel, TrainConfig


class Quadratic:
    """f(x) = -||x - c||^2, ascended."""

    ascent = True

    def __init__(self, c):
        self.c = torch.as_tensor(np.asarray(c).transpose(2, 0, 1)[None], dtype=torch.float64)

    def build(self, refs=None):
        return lambda x: -((x - self.c) ** 2).flatten(1).sum(dim=1)

    def modules(self):
        return []


def small_model(image_size=16, k=3, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    bb = EmbeddingBackend(BackboneSpec(width=4, embed_dim=8, image_size=image_size)).to(dtype)
    return IdentificationModel(bb, IdentitySet(tuple(f"p{i}" for i in range(k)))).to(dtype)


def test_parse_fraction():
    assert parse_fraction("4/255") == 4 / 255
    assert parse_fraction("0.5") == 0.5
    assert parse_fraction(3) == 3.0


def test_budget_validation_and_default_step():
    assert AttackBudget(epsilon=1e-12).step_size == 1e-12
    assert AttackBudget().step_size == 1 / 255
    with pytest.raises(ValueError):
        AttackBudget(epsilon=0)
    with pytest.raises(ValueError):
        AttackBudget(iterations=0)
    with pytest.raises(ValueError):
        AttackBudget(epsilon=1 / 255, step_size=2 / 255)


def test_vanishing_budget_leaves_input_unchanged():
    rng = np.random.default_rng(0)
    x = rng.random((16, 16, 3))
    res = bim_attack(x, AttackObjective("max_prob", surrogate=small_model()), AttackBudget(epsilon=1e-12))
    assert np.abs(res.final_image - x).max() <= 1e-9
    assert np.abs(res.adversarial_image - x).max() <= 1e-9


def test_single_step_moves_every_pixel_by_step_or_is_pinned():
    rng = np.random.default_rng(1)
    x = rng.random((16, 16, 3))
    x[0, 0, 0], x[1, 1, 1] = 0.0, 1.0
    budget = AttackBudget(epsilon=4 / 255, iterations=1, step_size=2 / 255)
    res = bim_attack(x, AttackObjective("max_prob", surrogate=small_model()), budget)
    d = np.abs(res.final_image - x)
    pinned = (res.final_image == 0.0) | (res.final_image == 1.0)
    assert np.all(np.isclose(d, 2 / 255, atol=1e-15) | pinned | (d == 0))
    assert np.isclose(d, 2 / 255, atol=1e-15).mean() > 0.9


def brute_force_best(x0, c, step, eps, iters):
    f = lambda x: -np.sum((x - c) ** 2)
    best = f(x0)
    n = x0.size
    for seq in itertools.product(itertools.product((-1.0, 1.0), repeat=n), repeat=iters):
        x = x0.copy()
        for s in seq:
            x = np.clip(np.clip(x + step * np.array(s).reshape(x0.shape), x0 - eps, x0 + eps), 0, 1)
            best = max(best, f(x))
    return best


def quad_case(seed, far):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.2, 0.8, (2, 2, 1))
    if far:
        # every coordinate of c lies beyond the ball, some beyond the box too
        c = x0 + rng.choice([-1.0, 1.0], (2, 2, 1)) * rng.uniform(0.3, 0.9, (2, 2, 1))
    else:
        c = x0 + rng.uniform(-0.4, 0.4, (2, 2, 1)) + 0.013
    return x0, c


@pytest.mark.parametrize("seed", range(4))
def test_bim_on_quadratic_matches_exhaustive_search(seed):
    x0, c = quad_case(seed, far=True)
    budget = AttackBudget(epsilon=0.25, iterations=3, step_size=0.1)
    out = bim_batch(x0[None], Quadratic(c), budget)
    best = -np.sum((out["best"][0] - c) ** 2)
    assert best == pytest.approx(brute_force_best(x0, c, 0.1, 0.25, 3), abs=1e-12)
    assert out["trace"].shape == (1, 4)
    assert out["trace"][0].max() == pytest.approx(best, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_bim_never_beats_exhaustive_search(seed):
    # with c inside the ball the greedy sign path can oscillate out of phase
    # across pixels, so only the inequality holds
    x0, c = quad_case(seed, far=False)
    out = bim_batch(x0[None], Quadratic(c), AttackBudget(epsilon=0.25, iterations=3, step_size=0.1))
    assert -np.sum((out["best"][0] - c) ** 2) <= brute_force_best(x0, c, 0.1, 0.25, 3) + 1e-12


def test_attack_outputs_satisfy_constraints():
    rng = np.random.default_rng(2)
    x = rng.random((4, 16, 16, 3))
    x[:, :2] = 0.0
    x[:, -2:] = 1.0
    for budget in (AttackBudget(epsilon=8 / 255, iterations=5), AttackBudget("2", epsilon=0.5, iterations=5, step_size=0.1)):
        out = bim_batch(x, AttackObjective("max_prob", surrogate=small_model()), budget)
        for key in ("best", "final"):
            adv = out[key]
            assert adv.min() >= 0.0 and adv.max() <= 1.0
            d = (adv - x).reshape(4, -1)
            if budget.norm_order == "inf":
                assert np.abs(d).max() <= budget.epsilon + 1e-15
            else:
                assert np.linalg.norm(d, axis=1).max() <= budget.epsilon + 1e-12


def test_embedding_objective_decreases():
    rng = np.random.default_rng(3)
    model = small_model()
    x, ref = rng.random((2, 16, 16, 3)), rng.random((2, 16, 16, 3))
    obj = AttackObjective("embed_distance", extractors=[model.backbone])
    out = bim_batch(x, obj, AttackBudget(epsilon=8 / 255, iterations=5), ref)
    assert np.all(out["trace"].min(axis=1) <= out["trace"][:, 0])


def test_distance_examples():
    assert cosine_distance([1, 0], [3, 0]) == 0.0
    assert cosine_distance([1, 0], [0, 2]) == pytest.approx(1.0)
    assert cosine_distance([1, 1], [-1, -1]) == pytest.approx(2.0)
    with pytest.raises(ZeroVector):
        cosine_distance([0, 0], [1, 0])


def test_embed_and_ensemble_distance_examples():
    rng = np.random.default_rng(4)
    z = small_model().backbone
    z2 = small_model(seed=1).backbone
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert embed_distance(z, a, a) == pytest.approx(0.0, abs=1e-12)
    assert ensemble_objective([z], a, b) == embed_distance(z, a, b)
    assert ensemble_objective([z, z], a, b) == pytest.approx(2 * embed_distance(z, a, b), abs=1e-15)
    assert ensemble_objective([z, z2], a, a) == pytest.approx(0.0, abs=1e-12)


class MeanDetector:
    """Score = mean pixel value, so brighter images look more real."""

    def scores(self, images):
        return np.asarray(images, dtype=np.float64).reshape(len(images), -1).mean(axis=1)


def test_identity_attack_has_zero_asr():
    real = np.full((4, 2, 2, 1), 0.8) + np.arange(4)[:, None, None, None] * 0.01
    fake = np.full((4, 2, 2, 1), 0.2) + np.arange(4)[:, None, None, None] * 0.01
    rep = measure_asr(MeanDetector(), fake, real, lambda x, r: x)
    assert rep.asr == 0.0 and rep.n_attacked == 4


def test_source_substitution_oracle():
    rng = np.random.default_rng(5)
    real = rng.uniform(0.4, 1.0, (20, 2, 2, 1))
    fake = rng.uniform(0.0, 0.6, (20, 2, 2, 1))
    sources = rng.uniform(0.0, 1.0, (20, 2, 2, 1))
    det = MeanDetector()
    from idconfusion.evalkit.metrics import eer_from_scores

    thr, _ = eer_from_scores(det.scores(real), det.scores(fake))
    detected = det.scores(fake) < thr
    rep = measure_asr(det, fake, real, lambda x, r: r, references=sources)
    expect = (det.scores(sources)[detected] > thr).mean()
    assert rep.asr == pytest.approx(expect)
    assert rep.n_attacked == detected.sum()


def test_two_point_asr():
    real, fake = np.full((1, 2, 2, 1), 0.9), np.full((1, 2, 2, 1), 0.1)
    det = MeanDetector()
    assert measure_asr(det, fake, real, lambda x, r: x + 0.5).asr == 1.0
    assert measure_asr(det, fake, real, lambda x, r: x + 0.2).asr == 0.0
    rep = measure_asr(det, fake, real, lambda x, r: x + 0.4)
    assert rep.threshold == pytest.approx(0.5) and rep.asr == 0.0  # 0.5 is not above the threshold


def test_no_detected_fakes_raises():
    real, fake = np.full((2, 2, 2, 1), 0.1), np.full((2, 2, 2, 1), 0.9)
    with pytest.raises(NoCorrectlyDetectedFakes):
        measure_asr(MeanDetector(), fake, real, lambda x, r: x, threshold=0.05)


def test_max_attacked_subsample_is_seeded():
    rng = np.random.default_rng(6)
    real, fake = rng.uniform(0.5, 1, (30, 2, 2, 1)), rng.uniform(0, 0.5, (30, 2, 2, 1))
    a = measure_asr(MeanDetector(), fake, real, lambda x, r: x + 0.3, max_attacked=10, seed=1)
    b = measure_asr(MeanDetector(), fake, real, lambda x, r: x + 0.3, max_attacked=10, seed=1)
    assert a.n_attacked == 10 and a.sample_ids == b.sample_ids


def test_single_identity_surrogate_makes_attack_a_no_op():
    bm = sf.build_benchmark(3, 2, 3, 2, seed=0)
    torch.manual_seed(0)
    bb = EmbeddingBackend(BackboneSpec(width=4, embed_dim=8))
    cfg = TrainConfig.finetune(epochs=1, n_blocks=1)
    surrogate = train_adaptive_surrogate(["id000"], bm.manifest, bb, cfg, images=bm)
    assert surrogate.identity_set.K == 1
    fakes = bm.stack(bm.manifest.select(is_fake=True))
    np.testing.assert_allclose(surrogate.predict_batch(fakes), 1.0)
    out = bim_batch(fakes, AttackObjective("max_prob", surrogate=surrogate), AttackBudget())
    np.testing.assert_array_equal(out["final"], fakes)
