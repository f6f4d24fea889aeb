"""Toy identity extractors: a four-stage CNN with a projection to the embedding space."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

STAGES = ("stage1", "stage2", "stage3", "stage4", "embed")


@dataclass(frozen=True)
class BackboneSpec:
    width: int = 16
    embed_dim: int = 128
    image_size: int = 64
    in_channels: int = 3
    normalize: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _stage(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.SiLU(),
    )


class EmbeddingBackend(nn.Module):
    """Maps NCHW images in [0, 1] to (optionally unit-norm) d-dimensional embeddings.

    Parameters are grouped into the named stages in ``STAGES``; ``trainable``
    records which of them may be updated by training code.
    """

    def __init__(self, spec: BackboneSpec = BackboneSpec()):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.stage1 = _stage(spec.in_channels, w)
        self.stage2 = _stage(w, 2 * w)
        self.stage3 = _stage(2 * w, 4 * w)
        self.stage4 = _stage(4 * w, 4 * w)
        side = spec.image_size // 16
        self.embed = nn.Linear(4 * w * side * side, spec.embed_dim)
        self.trainable = {name: False for name in STAGES}

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    def stage_parameters(self, name: str):
        return getattr(self, name).parameters()

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}; have {STAGES}")
        for name in STAGES:
            self.trainable[name] = name in names
            for p in self.stage_parameters(name):
                p.requires_grad_(name in names)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = (x - 0.5) / 0.5
        for name in STAGES[:4]:
            h = getattr(self, name)(h)
        return self.embed(h.flatten(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.features(x)
        if self.spec.normalize:
            z = F.normalize(z, dim=1)
        return z

    def stage_digest(self, name: str) -> str:
        h = hashlib.sha256()
        for k, v in sorted(getattr(self, name).state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def digests(self) -> dict:
        return {name: self.stage_digest(name) for name in STAGES}


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """NHWC / HWC numpy images to an NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def embed_images(backbone: EmbeddingBackend, images, batch_size: int = 256) -> np.ndarray:
    backbone.eval()
    out = []
    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(backbone(to_tensor(images[i : i + batch_size], dtype)).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, backbone.embed_dim))


class CosineMarginHead(nn.Module):
    """Large-margin cosine classifier used only for pretraining extractors."""

    def __init__(self, dim, n_classes, scale=30.0, margin=0.35):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, dim) * 0.01)
        self.scale = scale
        self.margin = margin

    def forward(self, z, labels=None):
        cos = F.linear(F.normalize(z, dim=1), F.normalize(self.weight, dim=1))
        if labels is not None:
            cos = cos - self.margin * F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return self.scale * cos

