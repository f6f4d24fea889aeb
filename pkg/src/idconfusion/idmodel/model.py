"""The K-way identification model and its checkpoint format."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import (
    IdentitySet,
    ShapeMismatch,
    CorruptCheckpoint,
    decode_json,
    encode_json,
    pack_arrays,
    read_checkpoint,
    unpack_arrays,
    write_checkpoint,
)
from .backbone import BackboneSpec, EmbeddingBackend, to_tensor


@dataclass(frozen=True)
class IdProbDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or (p < 0).any() or (p > 1).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("not a probability distribution")
        object.__setattr__(self, "probs", p)

    @property
    def K(self) -> int:
        return len(self.probs)

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


class IdentificationModel(nn.Module):
    """Backbone embedding, scaled by ``feature_scale``, followed by an affine K-way head."""

    def __init__(self, backbone: EmbeddingBackend, identity_set: IdentitySet, feature_scale: float = 32.0, head=None):
        super().__init__()
        self.backbone = backbone
        self.identity_set = identity_set
        self.feature_scale = float(feature_scale)
        self.head = head if head is not None else nn.Linear(backbone.embed_dim, identity_set.K)
        if self.head.out_features != identity_set.K:
            raise ValueError("head width does not match the identity set")
        self.train_info: dict = {}

    @property
    def input_shape(self) -> tuple:
        s = self.backbone.spec
        return (s.image_size, s.image_size, s.in_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.feature_scale * self.backbone(x))

    def logits_batch(self, images, batch_size: int = 256) -> np.ndarray:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if tuple(arr.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"expected images of shape {self.input_shape}, got {tuple(arr.shape[1:])}")
        dtype = next(self.parameters()).dtype
        self.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(arr), batch_size):
                out.append(self(to_tensor(arr[i : i + batch_size], dtype)).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.identity_set.K))

    def predict_batch(self, images, batch_size: int = 256) -> np.ndarray:
        logits = self.logits_batch(images, batch_size)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, image) -> IdProbDist:
        return IdProbDist(self.predict_batch(np.asarray(image)[None])[0])

    def save(self, path) -> None:
        save_checkpoint(self, path)


def predict(model: IdentificationModel, image) -> IdProbDist:
    return model.predict(image)


def _state_arrays(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: nn.Module, arrays: dict) -> None:
    try:
        module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    except RuntimeError as exc:
        raise CorruptCheckpoint(f"parameter mismatch: {exc}") from None


def save_checkpoint(model: IdentificationModel, path) -> None:
    config = {
        "backbone_spec": model.backbone.spec.to_dict(),
        "feature_scale": model.feature_scale,
        "trainable": model.backbone.trainable,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "training_config": model.train_info,
    }
    write_checkpoint(
        path,
        {
            "config": encode_json(config),
            "identities": encode_json(list(model.identity_set.labels)),
            "backbone": pack_arrays(_state_arrays(model.backbone)),
            "head": pack_arrays(_state_arrays(model.head)),
        },
    )


def load_checkpoint(path) -> IdentificationModel:
    sections = read_checkpoint(path)
    missing = {"config", "identities", "backbone", "head"} - set(sections)
    if missing:
        raise CorruptCheckpoint(f"missing sections {sorted(missing)}")
    try:
        config = decode_json(sections["config"])
        ids = IdentitySet(tuple(decode_json(sections["identities"])))
        backbone_arrays = unpack_arrays(sections["backbone"])
        head_arrays = unpack_arrays(sections["head"])
    except (ValueError, KeyError, OSError) as exc:
        raise CorruptCheckpoint(f"unreadable section: {exc}") from None
    backbone = EmbeddingBackend(BackboneSpec(**config["backbone_spec"]))
    model = IdentificationModel(backbone, ids, config["feature_scale"])
    if config.get("dtype") == "float64":
        model.double()
    _load_state(backbone, backbone_arrays)
    _load_state(model.head, head_arrays)
    backbone.set_trainable([k for k, v in config.get("trainable", {}).items() if v])
    model.train_info = config.get("training_config", {})
    model.eval()
    return model


def save_backbone(backbone: EmbeddingBackend, path) -> None:
    write_checkpoint(
        path,
        {"spec": encode_json(backbone.spec.to_dict()), "backbone": pack_arrays(_state_arrays(backbone))},
    )


def load_backbone(path) -> EmbeddingBackend:
    sections = read_checkpoint(path)
    if "spec" not in sections or "backbone" not in sections:
        raise CorruptCheckpoint("not a backbone checkpoint")
    backbone = EmbeddingBackend(BackboneSpec(**decode_json(sections["spec"])))
    _load_state(backbone, unpack_arrays(sections["backbone"]))
    backbone.eval()
    return backbone
