"""Pretrained toy identity extractors, trained on demand and cached on disk.

Each extractor is pretrained with a cosine-margin softmax on procedural
identities drawn from their own seed stream, so they never coincide with
benchmark identities.  Training images are rendered on the fly with random
shift, illumination, pixel noise and JPEG re-encoding.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import synthfaces as sf
from .idmodel.backbone import BackboneSpec, CosineMarginHead, EmbeddingBackend
from .idmodel.model import load_backbone, save_backbone


@dataclass(frozen=True)
class ExtractorRecipe:
    seed: int
    width: int = 16
    embed_dim: int = 128
    n_identities: int = 2000
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    margin: float = 0.35
    max_shift: int = 2
    illumination: tuple = (0.9, 1.1)
    noise_sigma: float = 0.02
    jpeg_prob: float = 0.5
    jpeg_quality: tuple = (15, 95)

    def digest(self) -> str:
        blob = json.dumps({**asdict(self), "generator": sf.GENERATOR_VERSION}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def spec(self) -> BackboneSpec:
        return BackboneSpec(width=self.width, embed_dim=self.embed_dim)


# "A" backs the detectors; "B", "C" and "D" differ in seed and width and play
# the manipulator's extractors that share no weights with the detector.
ZOO = {
    "A": ExtractorRecipe(seed=1),
    "B": ExtractorRecipe(seed=2, width=12),
    "C": ExtractorRecipe(seed=3, width=20),
    "D": ExtractorRecipe(seed=4, width=16),
}


def cache_dir() -> Path:
    root = os.environ.get("IDCONFUSION_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "idconfusion"


def _jpeg(batch: torch.Tensor, gen: torch.Generator, prob: float, quality: tuple) -> torch.Tensor:
    from PIL import Image

    if prob <= 0:
        return batch
    arr = (batch.permute(0, 2, 3, 1).numpy() * 255).round().astype(np.uint8)
    hit = torch.rand(len(arr), generator=gen) < prob
    qs = torch.randint(quality[0], quality[1] + 1, (len(arr),), generator=gen)
    for i in np.flatnonzero(hit.numpy()):
        buf = io.BytesIO()
        Image.fromarray(arr[i]).save(buf, format="JPEG", quality=int(qs[i]))
        buf.seek(0)
        arr[i] = np.asarray(Image.open(buf).convert("RGB"))
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2)


def augment(canon: torch.Tensor, gen: torch.Generator, recipe: ExtractorRecipe) -> torch.Tensor:
    """Random shift (border 0.5), illumination, noise, 8-bit quantization and optional JPEG."""
    n, _, h, w = canon.shape
    s = recipe.max_shift
    padded = F.pad(canon, (s, s, s, s), value=0.5)
    off = torch.randint(0, 2 * s + 1, (n, 2), generator=gen)
    out = torch.stack([padded[i, :, off[i, 0] : off[i, 0] + h, off[i, 1] : off[i, 1] + w] for i in range(n)])
    lo, hi = recipe.illumination
    out = out * (lo + (hi - lo) * torch.rand(n, 1, 1, 1, generator=gen))
    out = out + recipe.noise_sigma * torch.randn(out.shape, generator=gen)
    out = (out.clamp(0, 1) * 255).round() / 255
    return _jpeg(out, gen, recipe.jpeg_prob, recipe.jpeg_quality)


def pretrain_extractor(recipe: ExtractorRecipe, log=None) -> EmbeddingBackend:
    torch.manual_seed(recipe.seed)
    gen = torch.Generator().manual_seed(recipe.seed)
    rng = np.random.default_rng([recipe.seed, 0x5EED])
    protos = sf.sample_prototypes(recipe.n_identities, rng, margin=0.0, prefix="pre")
    rcfg = sf.RenderConfig()
    canon = torch.tensor(
        np.stack([sf._canonical(p.params, rcfg) for p in protos]).transpose(0, 3, 1, 2), dtype=torch.float32
    )
    backbone = EmbeddingBackend(recipe.spec)
    head = CosineMarginHead(recipe.embed_dim, len(protos), margin=recipe.margin)
    opt = torch.optim.Adam(list(backbone.parameters()) + list(head.parameters()), lr=recipe.lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, recipe.lr, total_steps=recipe.steps, pct_start=0.15)
    t0 = time.time()
    backbone.train()
    for step in range(recipe.steps):
        y = torch.randint(0, len(protos), (recipe.batch_size,), generator=gen)
        x = augment(canon[y], gen, recipe)
        loss = F.cross_entropy(head(backbone(x), y), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log and (step % 500 == 0 or step == recipe.steps - 1):
            log(f"pretrain step {step + 1}/{recipe.steps} loss {loss.item():.4f} ({time.time() - t0:.0f}s)")
    backbone.eval()
    backbone.set_trainable(())
    return backbone


def cached_path(name: str) -> Path:
    recipe = ZOO[name]
    return cache_dir() / f"extractor-{name}-{recipe.digest()}.idpf"


def load_extractor(name_or_path, log=None) -> EmbeddingBackend:
    """A zoo extractor by name (trained and cached on first use) or a backbone checkpoint path."""
    if name_or_path not in ZOO:
        path = Path(name_or_path)
        if not path.is_file():
            raise FileNotFoundError(f"{name_or_path!r} is neither a zoo extractor ({sorted(ZOO)}) nor a file")
        return load_backbone(path)
    path = cached_path(name_or_path)
    if path.is_file():
        return load_backbone(path)
    if log:
        log(f"extractor {name_or_path} not cached; pretraining to {path}")
    backbone = pretrain_extractor(ZOO[name_or_path], log)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_backbone(backbone, tmp)
    tmp.replace(path)
    return load_backbone(path)
