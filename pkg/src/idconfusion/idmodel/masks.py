"""Gradient-guided occlusion masks for attention-based finetuning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .. import kernels
from ..core import IdConfusionError
from .backbone import to_tensor


class NonDifferentiableBackend(IdConfusionError):
    pass


@dataclass(frozen=True)
class AttentionMask:
    blocks: tuple = field(default_factory=tuple)  # (row, col, size) of each occluded square, top-left
    fill_value: float = 0.5
    shape: tuple = (64, 64)

    def __post_init__(self):
        h, w = self.shape
        for r, c, s in self.blocks:
            if s < 0 or r < 0 or c < 0 or r + s > h or c + s > w:
                raise ValueError(f"block {(r, c, s)} outside a {h}x{w} image")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def coverage(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for r, c, s in self.blocks:
            m[r : r + s, c : c + s] = True
        return m


def default_block_size(image_side: int) -> int:
    # 4 px at 64x64; ten 8 px blocks hide too much of a small face
    return max(1, image_side // 16)


def blocks_from_map(grad_map: np.ndarray, n_blocks: int, block_size: int, suppress: int = None) -> tuple:
    """Pick `n_blocks` squares centered on successive maxima of a (H, W) relevance map.

    After each pick a ``suppress``-sided window (default twice the block size)
    around the peak is excluded from later picks.  Blocks are clamped inside
    the image.
    """
    h, w = grad_map.shape
    if n_blocks <= 0:
        return ()
    suppress = 2 * block_size if suppress is None else suppress
    peaks = kernels.select_blocks(np.ascontiguousarray(grad_map, dtype=np.float64), n_blocks, block_size, suppress)
    half = block_size // 2
    blocks = []
    for r, c in peaks:
        r0 = min(max(int(r) - half, 0), h - block_size)
        c0 = min(max(int(c) - half, 0), w - block_size)
        blocks.append((r0, c0, block_size))
    return tuple(blocks)


def input_gradient_maps(model, images, labels) -> np.ndarray:
    """|d logit[label] / d pixels| summed over channels, for a batch: (N, H, W)."""
    dtype = next(model.parameters()).dtype
    x = images if isinstance(images, torch.Tensor) else to_tensor(images, dtype)
    x = x.detach().clone().requires_grad_(True)
    was_training = model.training
    model.eval()
    logits = model(x)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    picked = logits.gather(1, y[:, None]).sum()
    if not picked.requires_grad:
        raise NonDifferentiableBackend("model output does not depend differentiably on its input")
    (grad,) = torch.autograd.grad(picked, x)
    model.train(was_training)
    return grad.abs().sum(dim=1).detach().double().numpy()


def attention_mask_from_gradients(
    model, image, label: int, n_blocks: int = 10, block_size: int = None, fill_value: float = 0.5
) -> AttentionMask:
    image = np.asarray(image)
    h, w = image.shape[:2]
    block_size = block_size or default_block_size(min(h, w))
    gmap = input_gradient_maps(model, image[None], [label])[0]
    return AttentionMask(blocks_from_map(gmap, n_blocks, block_size), fill_value, (h, w))


def apply_mask(image, mask: AttentionMask) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    for r, c, s in mask.blocks:
        out[r : r + s, c : c + s, ...] = mask.fill_value
    return out


def mask_tensor_batch(x: torch.Tensor, masks) -> torch.Tensor:
    """Apply one AttentionMask per NCHW image, returning a new tensor."""
    out = x.clone()
    for i, m in enumerate(masks):
        for r, c, s in m.blocks:
            out[i, :, r : r + s, c : c + s] = m.fill_value
    return out
