"""Training of identification heads: frozen transfer learning and attention-based finetuning."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..core import IdConfusionError, IdentitySet
from .backbone import STAGES, EmbeddingBackend, to_tensor
from .masks import AttentionMask, blocks_from_map, default_block_size, input_gradient_maps, mask_tensor_batch
from .model import IdentificationModel

log = logging.getLogger(__name__)


class FakeInTrainSet(IdConfusionError, ValueError):
    pass


class EmptyIdentity(IdConfusionError, ValueError):
    pass


class IndexOutOfRange(IdConfusionError, IndexError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    initial_lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_epochs: int = 10
    optimizer: str = "adam"
    mask_refresh_epochs: int = 5
    alpha: float = 0.5
    trainable_stages: tuple = ()
    n_blocks: int = 10
    block_size: Optional[int] = None
    fill_value: float = 0.5
    masking: bool = True
    label_smoothing: bool = True
    feature_scale: float = 32.0
    # JPEG re-encoded copies of each training image, quality drawn from jpeg_quality
    jpeg_copies: int = 2
    jpeg_quality: tuple = (15, 95)

    def __post_init__(self):
        self.trainable_stages = tuple(self.trainable_stages)
        self.jpeg_quality = tuple(int(q) for q in self.jpeg_quality)
        if self.jpeg_copies < 0:
            raise ValueError("jpeg_copies must be non-negative")
        if len(self.jpeg_quality) != 2 or not 1 <= self.jpeg_quality[0] <= self.jpeg_quality[1] <= 100:
            raise ValueError("jpeg_quality must be a (low, high) pair within [1, 100]")
        for name in ("epochs", "batch_size", "lr_decay_epochs", "mask_refresh_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.initial_lr <= 0 or self.lr_decay <= 0 or self.feature_scale <= 0:
            raise ValueError("learning rate, decay and feature scale must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be non-negative")
        unknown = set(self.trainable_stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_stages"] = list(self.trainable_stages)
        d["jpeg_quality"] = list(self.jpeg_quality)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def finetune(cls, **kw) -> "TrainConfig":
        """Defaults for attention finetuning: final stage and projection open."""
        kw.setdefault("trainable_stages", ("stage4", "embed"))
        return cls(**kw)


@dataclass(frozen=True)
class SmoothedLabel:
    target_index: int
    alpha: float
    values: np.ndarray


def smooth_label(target_index: int, K: int, alpha: float) -> SmoothedLabel:
    """(1 - alpha) * one_hot + alpha * uniform; entries are exact for alpha in {0, 1}."""
    if K < 1:
        raise ValueError("K must be positive")
    if not 0 <= target_index < K:
        raise IndexOutOfRange(f"target index {target_index} outside [0, {K})")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    values = np.full(K, alpha / K)
    values[target_index] = 1.0 - alpha + alpha / K
    return SmoothedLabel(target_index, alpha, values)


def smooth_targets(labels: torch.Tensor, K: int, alpha: float) -> torch.Tensor:
    t = torch.full((len(labels), K), alpha / K, dtype=torch.float64)
    t[torch.arange(len(labels)), labels] = 1.0 - alpha + alpha / K
    return t


def labels_from_records(records, identity_set: IdentitySet) -> np.ndarray:
    for r in records:
        if r.is_fake:
            raise FakeInTrainSet(f"{r.path} is a fake record")
    y = np.array([identity_set.index(r.identity) for r in records], dtype=np.int64)
    counts = np.bincount(y, minlength=identity_set.K)
    if (counts == 0).any():
        missing = [identity_set.label(i) for i in np.flatnonzero(counts == 0)]
        raise EmptyIdentity(f"no training images for {missing[:5]}")
    return y


def _new_head(backbone: EmbeddingBackend, K: int, seed: int, dtype) -> torch.nn.Linear:
    # Zero start: with few images per identity the head only sees a few dozen
    # updates, and a random start leaves most of its norm in noise.
    torch.manual_seed(seed)
    head = torch.nn.Linear(backbone.embed_dim, K).to(dtype)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    return head


def _schedule(opt, cfg: TrainConfig):
    return torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_epochs, gamma=cfg.lr_decay)


def with_jpeg_copies(images, labels, cfg: TrainConfig, seed: int = 0):
    """Append ``cfg.jpeg_copies`` re-encoded copies of every image, with matching labels."""
    from ..evalkit.studies import jpeg_roundtrip

    images, labels = np.asarray(images), np.asarray(labels, dtype=np.int64)
    if cfg.jpeg_copies == 0 or len(labels) == 0:
        return images, labels
    rng = np.random.default_rng(seed)
    lo, hi = cfg.jpeg_quality
    copies = [
        np.stack([jpeg_roundtrip(x, int(rng.integers(lo, hi + 1))) for x in images]).astype(images.dtype)
        for _ in range(cfg.jpeg_copies)
    ]
    return np.concatenate([images, *copies]), np.tile(labels, 1 + cfg.jpeg_copies)


def fit_frozen(images, labels, identity_set: IdentitySet, backbone: EmbeddingBackend, cfg: TrainConfig, seed: int = 0):
    """Train only the affine head on top of a frozen copy of `backbone`."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyIdentity("empty training set")
    images, labels = with_jpeg_copies(images, labels, cfg, seed)
    backbone = copy.deepcopy(backbone)
    backbone.set_trainable(())
    backbone.eval()
    dtype = next(backbone.parameters()).dtype
    model = IdentificationModel(backbone, identity_set, cfg.feature_scale, _new_head(backbone, identity_set.K, seed, dtype))
    with torch.no_grad():
        feats = torch.cat(
            [backbone(to_tensor(images[i : i + 256], dtype)) for i in range(0, len(images), 256)]
        ) * cfg.feature_scale
    y = torch.as_tensor(labels)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.head.parameters(), lr=cfg.initial_lr)
    sched = _schedule(opt, cfg)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(y), generator=gen)
        for i in range(0, len(y), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            loss = F.cross_entropy(model.head(feats[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    model.train_info = {"kind": "baseline", "seed": seed, **cfg.to_dict()}
    model.eval()
    return model


def fit_attention(
    images, labels, identity_set: IdentitySet, backbone: EmbeddingBackend, cfg: TrainConfig, seed: int = 0, stats=None,
    init=None,
):
    """Finetune open backbone stages plus the head on gradient-masked images.

    The head starts from ``init.head`` when a trained identification model
    over the same identities is given (the usual case: finetuning a
    baseline), otherwise from zero.  Optimizer state always starts fresh.

    Masks come from a frozen snapshot of the model being trained, retaken
    every ``cfg.mask_refresh_epochs`` epochs.  Masked images are supervised
    with smoothed labels when ``cfg.label_smoothing`` is set.  `stats`, if a
    dict, receives the snapshot count and per-epoch losses.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyIdentity("empty training set")
    images, labels = with_jpeg_copies(images, labels, cfg, seed)
    backbone = copy.deepcopy(backbone)
    backbone.set_trainable(cfg.trainable_stages)
    dtype = next(backbone.parameters()).dtype
    K = identity_set.K
    head = _new_head(backbone, K, seed, dtype)
    if init is not None:
        if tuple(init.identity_set.labels) != tuple(identity_set.labels):
            raise ValueError("init model covers a different identity set")
        head.load_state_dict(init.head.state_dict())
    model = IdentificationModel(backbone, identity_set, cfg.feature_scale, head)
    x_all = to_tensor(images, dtype)
    y_all = torch.as_tensor(labels)
    side = x_all.shape[-1]
    block = cfg.block_size or default_block_size(min(x_all.shape[-2:]))
    use_masks = cfg.masking and cfg.n_blocks > 0
    alpha = cfg.alpha if cfg.label_smoothing else 0.0
    gen = torch.Generator().manual_seed(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.initial_lr)
    sched = _schedule(opt, cfg)
    snapshot = None
    n_snapshots = 0
    losses = []
    for epoch in range(cfg.epochs):
        if use_masks and epoch % cfg.mask_refresh_epochs == 0:
            snapshot = copy.deepcopy(model).eval()
            for p in snapshot.parameters():
                p.requires_grad_(False)
            n_snapshots += 1
        model.train()
        perm = torch.randperm(len(y_all), generator=gen)
        total = 0.0
        for i in range(0, len(y_all), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            if use_masks:
                gmaps = input_gradient_maps(snapshot, x, y.numpy())
                masks = [
                    AttentionMask(blocks_from_map(g, cfg.n_blocks, block), cfg.fill_value, (side, side))
                    for g in gmaps
                ]
                x = mask_tensor_batch(x, masks)
            logp = F.log_softmax(model(x), dim=1)
            if alpha > 0:
                loss = -(smooth_targets(y, K, alpha).to(logp.dtype) * logp).sum(dim=1).mean()
            else:
                loss = F.nll_loss(logp, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        losses.append(total / len(y_all))
        log.debug("finetune epoch %d loss %.4f", epoch + 1, losses[-1])
    model.train_info = {"kind": "attention_finetune", "seed": seed, **cfg.to_dict()}
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    if isinstance(stats, dict):
        stats.update(snapshots=n_snapshots, losses=losses)
    return model


def _manifest_arrays(train, images):
    records = [r for r in train.records if r.split == "train"]
    y = labels_from_records(records, train.identity_set)
    x = np.stack([images.load(r) for r in records])
    return x, y


def train_baseline(train, backbone: EmbeddingBackend, cfg: TrainConfig = None, seed: int = 0, images=None):
    """Frozen-backbone identification model from the train split of a manifest.

    `images` is anything with a ``load(record)`` method returning a float
    HxWxC array (a ``Benchmark`` or ``DirectoryImages``).
    """
    cfg = cfg or TrainConfig()
    x, y = _manifest_arrays(train, images)
    return fit_frozen(x, y, train.identity_set, backbone, cfg, seed)


def finetune_attention(
    train, backbone: EmbeddingBackend, cfg: TrainConfig = None, seed: int = 0, images=None, stats=None, init=None
):
    cfg = cfg or TrainConfig.finetune()
    x, y = _manifest_arrays(train, images)
    return fit_attention(x, y, train.identity_set, backbone, cfg, seed, stats, init)
