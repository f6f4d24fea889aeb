"""SmoothGrad saliency maps of the predicted identity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..idmodel.backbone import to_tensor
from ..idmodel.masks import NonDifferentiableBackend


@dataclass
class SaliencyMap:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("saliency values must be finite and non-negative")

    def area_above(self, fraction: float = 0.2) -> int:
        """Pixels whose relevance exceeds `fraction` of the map maximum."""
        top = self.values.max()
        if top <= 0:
            return 0
        return int((self.values > fraction * top).sum())


def smoothgrad_saliency(model, image, n_samples: int = 25, sigma: float = 0.1, seed: int = 0) -> SaliencyMap:
    """Mean |d logit[pred] / dx| over Gaussian-perturbed copies, summed over channels, max-normalized.

    The predicted class is fixed from the clean image.  ``sigma=0`` with one
    sample gives the plain gradient-magnitude map.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    dtype = next(model.parameters()).dtype
    model.eval()
    x0 = to_tensor(np.asarray(image), dtype)
    with torch.no_grad():
        pred = int(model(x0).argmax(dim=1))
    gen = torch.Generator().manual_seed(seed)
    noise = sigma * torch.randn((n_samples,) + tuple(x0.shape[1:]), generator=gen, dtype=torch.float64).to(dtype)
    x = (x0 + noise).requires_grad_(True)
    out = model(x)[:, pred].sum()
    if not out.requires_grad:
        raise NonDifferentiableBackend("model output does not depend differentiably on its input")
    (grad,) = torch.autograd.grad(out, x)
    sal = grad.abs().mean(dim=0).sum(dim=0).double().numpy()
    top = sal.max()
    if top > 0:
        sal = sal / top
    return SaliencyMap(sal, {"n_samples": n_samples, "sigma": sigma, "seed": seed, "predicted": pred})
