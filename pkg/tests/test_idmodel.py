import numpy as np
import pytest
import torch

from idconfusion.core import IdentitySet, ShapeMismatch
from idconfusion.idmodel import (
    AttentionMask,
    BackboneSpec,
    EmbeddingBackend,
    IdentificationModel,
    TrainConfig,
    apply_mask,
    attention_mask_from_gradients,
    blocks_from_map,
    fit_attention,
    fit_frozen,
    load_checkpoint,
    save_checkpoint,
    smooth_label,
)
from idconfusion.idmodel.masks import NonDifferentiableBackend, input_gradient_maps
from idconfusion.idmodel.training import (
    EmptyIdentity,
    FakeInTrainSet,
    IndexOutOfRange,
    labels_from_records,
    with_jpeg_copies,
)
from idconfusion.core import SampleRecord

from oracles import topk_with_suppression

TINY = BackboneSpec(width=4, embed_dim=8, image_size=16)


def tiny_backbone(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return EmbeddingBackend(TINY).to(dtype)


def tiny_data(k=3, per=4, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.random((k, 16, 16, 3))
    x = np.concatenate([np.clip(base[i] + 0.05 * rng.normal(size=(per, 16, 16, 3)), 0, 1) for i in range(k)])
    y = np.repeat(np.arange(k), per)
    return x, y, IdentitySet(tuple(f"p{i}" for i in range(k)))


def test_smooth_label_example():
    lab = smooth_label(3, 59, 0.5)
    assert lab.values[3] == pytest.approx(0.5084745762711864, abs=1e-15)
    others = np.delete(lab.values, 3)
    assert np.all(others == pytest.approx(0.00847457627118644, abs=1e-15))
    assert lab.values.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("k,alpha", [(2, 0.5), (10, 0.1), (1000, 0.3), (1, 0.7)])
def test_smooth_label_sums_to_one(k, alpha):
    v = smooth_label(0, k, alpha).values
    assert v.sum() == pytest.approx(1.0, abs=1e-12)
    assert v.argmax() == 0


def test_smooth_label_alpha_zero_is_one_hot_and_range_checked():
    np.testing.assert_array_equal(smooth_label(2, 4, 0.0).values, [0, 0, 1, 0])
    with pytest.raises(IndexOutOfRange):
        smooth_label(4, 4, 0.5)


def test_embeddings_are_unit_norm():
    z = tiny_backbone()(torch.rand(5, 3, 16, 16))
    np.testing.assert_allclose(z.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)


def test_predict_is_distribution_and_checks_shape():
    x, y, ids = tiny_data()
    model = IdentificationModel(tiny_backbone(), ids)
    p = model.predict_batch(x)
    assert np.all(p >= 0) and np.allclose(p.sum(1), 1.0, atol=1e-6)
    with pytest.raises(ShapeMismatch):
        model.predict_batch(np.zeros((1, 8, 8, 3)))


def test_single_identity_model_is_always_certain():
    x, y, _ = tiny_data(k=1)
    model = fit_frozen(x, y, IdentitySet(("solo",)), tiny_backbone(), TrainConfig(epochs=2))
    np.testing.assert_allclose(model.predict_batch(np.random.default_rng(1).random((4, 16, 16, 3)))[:, 0], 1.0)


def test_frozen_training_leaves_backbone_untouched():
    x, y, ids = tiny_data()
    bb = tiny_backbone()
    before = bb.digests()
    model = fit_frozen(x, y, ids, bb, TrainConfig(epochs=3))
    assert model.backbone.digests() == before
    assert bb.digests() == before


def test_frozen_head_separates_separable_embeddings():
    # Reference: nearest class centroid in embedding space is a closed-form
    # linear separator here; the trained head must agree with it on every
    # training point.
    rng = np.random.default_rng(2)
    colors = rng.random((4, 1, 1, 3))
    x = np.clip(np.repeat(colors, 6, axis=0) + 0.01 * rng.normal(size=(24, 16, 16, 3)), 0, 1)
    y = np.repeat(np.arange(4), 6)
    ids = IdentitySet(tuple("abcd"))
    bb = tiny_backbone(3)
    for m in bb.modules():  # bias-free so that distinct colors map to distinct directions
        if getattr(m, "bias", None) is not None:
            m.bias.data.zero_()
    with torch.no_grad():
        z = bb(torch.as_tensor(x.transpose(0, 3, 1, 2), dtype=torch.float32)).numpy()
    cents = np.stack([z[y == k].mean(0) for k in range(4)])
    ncm = np.argmax(z @ cents.T - 0.5 * (cents**2).sum(1), axis=1)
    assert (ncm == y).all()
    model = fit_frozen(x, y, ids, bb, TrainConfig(epochs=60, batch_size=8, lr_decay_epochs=40, initial_lr=1e-2))
    assert (model.predict_batch(x).argmax(1) == y).all()


def test_labels_reject_fakes_and_missing_identities():
    ids = IdentitySet(("a", "b"))
    with pytest.raises(FakeInTrainSet):
        labels_from_records([SampleRecord("f.png", None, True, "a", "b")], ids)
    with pytest.raises(EmptyIdentity):
        labels_from_records([SampleRecord("r.png", "a")], ids)


def test_input_gradient_matches_finite_differences():
    bb = tiny_backbone(5, torch.float64)
    x, y, ids = tiny_data()
    model = IdentificationModel(bb, ids).double()
    img = torch.as_tensor(x[:1].transpose(0, 3, 1, 2)).double().requires_grad_(True)
    f = lambda t: model(t)[0, 1]
    (g,) = torch.autograd.grad(f(img), img)
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(10):
        idx = (0, *[int(rng.integers(s)) for s in img.shape[1:]])
        e = torch.zeros_like(img)
        e[idx] = h
        with torch.no_grad():
            fd = (f(img + e) - f(img - e)) / (2 * h)
        assert abs(fd.item() - g[idx].item()) <= 1e-3 * max(abs(fd.item()), 1e-8)


def test_block_picker_single_peak_and_clamping():
    g = np.zeros((16, 16))
    g[8, 9] = 1.0
    assert blocks_from_map(g, 1, 4) == ((6, 7, 4),)
    g2 = np.zeros((16, 16))
    g2[0, 15] = 5.0
    assert blocks_from_map(g2, 1, 4) == ((0, 12, 4),)


def test_block_picker_breaks_ties_row_major():
    g = np.ones((16, 16))
    peaks = [(r + 2, c + 2) for r, c, _ in blocks_from_map(g, 3, 4)]
    np.testing.assert_array_equal(topk_with_suppression(g, 3, 8), [[0, 0], [0, 4], [0, 8]])
    assert blocks_from_map(g, 3, 4)[0] == (0, 0, 4)
    assert len(peaks) == 3


@pytest.mark.parametrize("seed", range(5))
def test_block_picker_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    g = np.round(rng.random((20, 20)), 1)  # many ties
    from idconfusion import kernels

    np.testing.assert_array_equal(kernels.select_blocks(g, 6, 4, 8), topk_with_suppression(g, 6, 8))


def test_picker_falls_back_when_everything_is_excluded():
    g = np.arange(16.0).reshape(4, 4)
    from idconfusion import kernels

    peaks = kernels.select_blocks(g, 3, 4, 8)
    np.testing.assert_array_equal(peaks, topk_with_suppression(g, 3, 8))
    assert tuple(peaks[1]) == (3, 3)


def test_mask_application_and_validation():
    m = AttentionMask(((0, 0, 2), (2, 2, 2)), 0.5, (4, 4))
    out = apply_mask(np.zeros((4, 4, 3)), m)
    assert out[:2, :2].min() == 0.5 and out[2:, 2:].min() == 0.5 and out[0, 3, 0] == 0.0
    assert m.coverage().sum() == 8
    with pytest.raises(ValueError):
        AttentionMask(((3, 3, 2),), 0.5, (4, 4))


def test_mask_from_model_gradients():
    x, y, ids = tiny_data()
    model = IdentificationModel(tiny_backbone(), ids)
    m = attention_mask_from_gradients(model, x[0], 0, n_blocks=3, block_size=2)
    assert m.n_blocks == 3 and m.shape == (16, 16)


def test_non_differentiable_backend_raises():
    class Flat(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.zeros(1))

        def forward(self, x):
            return torch.zeros(x.shape[0], 2) + 0 * self.w.detach()

    with pytest.raises(NonDifferentiableBackend):
        input_gradient_maps(Flat(), np.zeros((1, 4, 4, 3)), [0])


def test_attention_finetune_snapshot_count():
    x, y, ids = tiny_data()
    stats = {}
    cfg = TrainConfig.finetune(epochs=30, batch_size=12, n_blocks=2, block_size=2)
    fit_attention(x, y, ids, tiny_backbone(), cfg, stats=stats)
    assert stats["snapshots"] == 6
    assert len(stats["losses"]) == 30


def test_attention_finetune_only_opens_requested_stages():
    x, y, ids = tiny_data()
    bb = tiny_backbone()
    before = bb.digests()
    model = fit_attention(x, y, ids, bb, TrainConfig.finetune(epochs=2, n_blocks=1, block_size=2))
    after = model.backbone.digests()
    assert after["stage1"] == before["stage1"] and after["stage3"] == before["stage3"]
    assert after["stage4"] != before["stage4"]
    assert bb.digests() == before


def test_degenerate_finetune_matches_baseline():
    x, y, ids = tiny_data(k=4, per=5)
    cfg = TrainConfig(epochs=8, batch_size=8, masking=False, label_smoothing=False, trainable_stages=())
    a = fit_frozen(x, y, ids, tiny_backbone(), cfg, seed=3)
    b = fit_attention(x, y, ids, tiny_backbone(), cfg, seed=3)
    np.testing.assert_allclose(a.predict_batch(x), b.predict_batch(x), atol=1e-5)


def test_checkpoint_roundtrip(tmp_path):
    x, y, ids = tiny_data()
    model = fit_frozen(x, y, ids, tiny_backbone(), TrainConfig(epochs=2))
    save_checkpoint(model, tmp_path / "m.idpf")
    again = load_checkpoint(tmp_path / "m.idpf")
    np.testing.assert_array_equal(model.predict_batch(x), again.predict_batch(x))
    assert again.identity_set == ids
    assert again.train_info["epochs"] == 2


def test_jpeg_copies_append_reencoded_images_with_tiled_labels():
    # smooth images: chroma subsampling would wipe out per-pixel colour noise
    ramp = np.linspace(0.1, 0.9, 16)
    x = np.stack([np.stack([*np.meshgrid(ramp, ramp[::-1]), np.full((16, 16), c)], -1) for c in (0.2, 0.5, 0.8)])
    y = np.arange(3)
    xa, ya = with_jpeg_copies(x, y, TrainConfig(jpeg_copies=2, jpeg_quality=(90, 90)), seed=1)
    assert xa.shape == (3 * len(x),) + x.shape[1:]
    np.testing.assert_array_equal(xa[: len(x)], x)
    np.testing.assert_array_equal(ya, np.tile(y, 3))
    assert 0 < np.abs(xa[len(x) :] - np.tile(x, (2, 1, 1, 1))).mean() < 0.02
    assert xa.min() >= 0 and xa.max() <= 1


def test_jpeg_copies_zero_is_identity():
    x, y, _ = tiny_data()
    xa, ya = with_jpeg_copies(x, y, TrainConfig(jpeg_copies=0))
    assert xa is x or np.array_equal(xa, x)
    np.testing.assert_array_equal(ya, y)


@pytest.mark.parametrize("kw", [{"jpeg_copies": -1}, {"jpeg_quality": (0, 50)}, {"jpeg_quality": (90, 20)}])
def test_jpeg_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
