"""Procedural identities, real renders and simulated face swaps.

Every identity is a point in a low-dimensional parameter space that drives a
fixed arrangement of Gaussian blobs (eyes, brows, nose, mouth, cheeks) on an
elliptical face, plus a striped skin texture.  Rendering is smooth in the
parameters, so blending two parameter vectors produces a face whose identity
lies between them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import DatasetManifest, IdentitySet, SampleRecord, InvalidRange

GENERATOR_VERSION = 2

# (u, v) anchors in normalized face coordinates, u right, v down.
BLOB_ANCHORS = np.array(
    [
        [-0.30, -0.18],  # left eye
        [0.30, -0.18],  # right eye
        [-0.30, -0.42],  # left brow
        [0.30, -0.42],  # right brow
        [0.00, 0.08],  # nose
        [0.00, 0.38],  # mouth
        [-0.48, 0.18],  # left cheek
        [0.48, 0.18],  # right cheek
    ]
)
N_BLOBS = len(BLOB_ANCHORS)
# skin rgb (3) + face axes (2) + per blob rgb, sigma, du, dv (6 each) + stripes (4)
N_PARAMS = 3 + 2 + 6 * N_BLOBS + 4

MECHANISMS = ("latent_blend", "masked_pixel_blend")
SWAP_AXES = (0.54, 0.66)


@dataclass(frozen=True)
class IdentityPrototype:
    identity: str
    pattern_params: tuple

    def __post_init__(self):
        if len(self.pattern_params) != N_PARAMS:
            raise ValueError(f"expected {N_PARAMS} pattern params, got {len(self.pattern_params)}")

    @property
    def params(self) -> np.ndarray:
        return np.asarray(self.pattern_params, dtype=np.float64)


@dataclass(frozen=True)
class AttributeParams:
    pose_shift: tuple = (0, 0)
    illumination_scale: float = 1.0
    noise_seed: Optional[int] = None

    def __post_init__(self):
        if not 0.5 <= self.illumination_scale <= 1.5:
            raise ValueError(f"illumination_scale {self.illumination_scale} outside [0.5, 1.5]")
        if len(self.pose_shift) != 2:
            raise ValueError("pose_shift must be a 2-vector")
        object.__setattr__(self, "pose_shift", tuple(int(s) for s in self.pose_shift))


@dataclass(frozen=True)
class SwapSpec:
    source: IdentityPrototype
    target: IdentityPrototype
    target_attributes: AttributeParams
    blend: float = 0.75
    mechanism: str = "latent_blend"

    def __post_init__(self):
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend weight {self.blend} outside [0, 1]")
        if self.source.identity == self.target.identity:
            raise ValueError("source and target must be different identities")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown swap mechanism {self.mechanism!r}")


@dataclass(frozen=True)
class RenderConfig:
    size: int = 64
    channels: int = 3
    noise_sigma: float = 0.02
    border_fill: float = 0.5
    background: float = 0.5
    feather_width: float = 3.0
    # swapped region of masked_pixel_blend, in normalized units
    swap_axes: tuple = SWAP_AXES


def _unpack(params: np.ndarray) -> dict:
    p = np.clip(params, -1.0, 1.0)
    i = 0
    skin = 0.55 + 0.24 * p[i : i + 3]
    i += 3
    axes = np.array([0.64, 0.80]) + 0.08 * p[i : i + 2]
    i += 2
    blobs = p[i : i + 6 * N_BLOBS].reshape(N_BLOBS, 6)
    i += 6 * N_BLOBS
    stripes = p[i : i + 4]
    return {
        "skin": skin,
        "axes": axes,
        "blob_rgb": 0.525 * blobs[:, 0:3],
        "blob_sigma": 0.10 + 0.04 * blobs[:, 3],
        "blob_offset": BLOB_ANCHORS + 0.105 * blobs[:, 4:6],
        "stripe_freq": 2.5 + 1.5 * stripes[0],
        "stripe_angle": 0.8 * stripes[1],
        "stripe_phase": 1.5 * stripes[2],
        "stripe_amp": 0.06 + 0.04 * stripes[3],
    }


def _grid(size: int):
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(ax, ax, indexing="ij")
    return u, v


def _canonical(params: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """Noise-free, unshifted, unit-illumination render as float64 HxWx3."""
    q = _unpack(params)
    u, v = _grid(cfg.size)
    a, b = q["axes"]
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # soft face edge, about one pixel wide
    edge = 1.0 / (1.0 + np.exp((r - 1.0) * cfg.size * 0.25))
    img = np.empty((cfg.size, cfg.size, 3))
    img[:] = cfg.background
    face = q["skin"][None, None, :] * np.ones((cfg.size, cfg.size, 1))
    ang = q["stripe_angle"]
    wave = np.sin(2 * np.pi * q["stripe_freq"] * (u * np.cos(ang) + v * np.sin(ang)) + q["stripe_phase"])
    face += (q["stripe_amp"] * wave)[..., None]
    for k in range(N_BLOBS):
        cu, cv = q["blob_offset"][k]
        s = q["blob_sigma"][k]
        g = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s * s))
        face += g[..., None] * q["blob_rgb"][k][None, None, :]
    img = img * (1 - edge[..., None]) + face * edge[..., None]
    return img


def _shift(img: np.ndarray, shift: Sequence[int], fill: float) -> np.ndarray:
    dy, dx = shift
    out = np.full_like(img, fill)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _apply_attributes(img: np.ndarray, attrs: AttributeParams, cfg: RenderConfig) -> np.ndarray:
    img = _shift(img, attrs.pose_shift, cfg.border_fill)
    img = img * attrs.illumination_scale
    if attrs.noise_seed is not None and cfg.noise_sigma > 0:
        rng = np.random.default_rng(attrs.noise_seed)
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _finish(img: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    if cfg.channels == 1:
        img = img.mean(axis=2, keepdims=True)
    return img


def render_params(params: np.ndarray, attrs: AttributeParams, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    return _finish(_apply_attributes(_canonical(np.asarray(params, float), cfg), attrs, cfg), cfg)


def render_real(proto: IdentityPrototype, attrs: AttributeParams, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render `proto` under `attrs` as a float HxWxC image in [0, 1]."""
    return render_params(proto.params, attrs, cfg)


def swap_region_weight(attrs: AttributeParams, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Feathered elliptical weight map (1 inside the swapped region), following the pose shift."""
    u, v = _grid(cfg.size)
    a, b = cfg.swap_axes
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # approximate signed pixel distance to the ellipse boundary
    dist = (1.0 - r) * min(a, b) * cfg.size / 2.0
    if cfg.feather_width > 0:
        w = np.clip(0.5 + dist / cfg.feather_width, 0.0, 1.0)
    else:
        w = (dist >= 0).astype(float)
    return _shift(w[..., None], attrs.pose_shift, 0.0)


def render_swap(spec: SwapSpec, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    attrs = spec.target_attributes
    if spec.mechanism == "latent_blend":
        mixed = spec.blend * spec.source.params + (1.0 - spec.blend) * spec.target.params
        return render_params(mixed, attrs, cfg)
    # masked_pixel_blend: noise-free layers, composited, then shared illumination and noise
    src = _canonical(spec.source.params, cfg)
    tgt = _canonical(spec.target.params, cfg)
    clean = AttributeParams(attrs.pose_shift, 1.0, None)
    src = _apply_attributes(src, clean, cfg)
    tgt = _apply_attributes(tgt, clean, cfg)
    w = swap_region_weight(attrs, cfg)
    comp = w * src + (1.0 - w) * tgt
    return _finish(_apply_attributes(comp, AttributeParams((0, 0), attrs.illumination_scale, attrs.noise_seed), cfg), cfg)


def sample_prototypes(
    n: int, rng: np.random.Generator, margin: float = 2.0, prefix: str = "id", max_tries: int = 10000
) -> list:
    """Draw `n` prototypes uniformly in [-1, 1]^P with pairwise distance >= margin."""
    protos: list = []
    kept: list = []
    tries = 0
    while len(protos) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n} prototypes with margin {margin}")
        p = rng.uniform(-1.0, 1.0, N_PARAMS)
        if kept and np.min(np.linalg.norm(np.asarray(kept) - p, axis=1)) < margin:
            continue
        kept.append(p)
        protos.append(IdentityPrototype(f"{prefix}{len(protos):03d}", tuple(float(x) for x in p)))
    return protos


@dataclass(frozen=True)
class AttributeRanges:
    max_shift: int = 1
    illumination: tuple = (0.95, 1.05)

    def sample(self, rng: np.random.Generator) -> AttributeParams:
        s = rng.integers(-self.max_shift, self.max_shift + 1, size=2)
        return AttributeParams(
            (int(s[0]), int(s[1])),
            float(rng.uniform(*self.illumination)),
            int(rng.integers(0, 2**31 - 1)),
        )


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class BenchmarkConfig:
    n_ids: int = 50
    per_id_train: int = 10
    n_real_test: int = 1000
    n_fake_test: int = 1000
    blend_range: tuple = (0.6, 0.9)
    mechanisms: tuple = MECHANISMS
    seed: int = 0
    margin: float = 2.0
    size: int = 64
    max_shift: int = 1
    illumination: tuple = (0.95, 1.05)
    noise_sigma: float = 0.02
    feather_width: float = 3.0
    swap_axes: tuple = SWAP_AXES
    version: int = GENERATOR_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def render(self) -> RenderConfig:
        return RenderConfig(
            size=self.size, noise_sigma=self.noise_sigma, feather_width=self.feather_width,
            swap_axes=tuple(self.swap_axes),
        )

    @property
    def attributes(self) -> AttributeRanges:
        return AttributeRanges(self.max_shift, tuple(self.illumination))


@dataclass
class Benchmark:
    """A generated dataset: manifest, 8-bit images keyed by record path, prototypes and config."""

    manifest: DatasetManifest
    images: dict
    prototypes: dict
    config: BenchmarkConfig
    attributes: dict = field(default_factory=dict)

    def load(self, record: SampleRecord) -> np.ndarray:
        return self.images[record.path].astype(np.float64) / 255.0

    def stack(self, records: Iterable[SampleRecord]) -> np.ndarray:
        return np.stack([self.load(r) for r in records])

    def save(self, root) -> None:
        from pathlib import Path

        from PIL import Image

        root = Path(root)
        for path, arr in self.images.items():
            dest = root / path
            dest.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr.squeeze() if arr.shape[2] == 1 else arr).save(dest)
        self.manifest.save(root / "manifest.jsonl")
        (root / "generator.json").write_text(self.config.to_json() + "\n")


def build_benchmark(
    n_ids: int = 50,
    per_id_train: int = 10,
    n_real_test: int = 1000,
    n_fake_test: int = 1000,
    blend_range=(0.6, 0.9),
    mechanisms=MECHANISMS,
    seed: int = 0,
    **overrides,
) -> Benchmark:
    """Generate a reproducible benchmark of train reals, test reals and test fakes.

    Test reals are spread round-robin over identities; fakes draw an ordered
    (source, target) pair of distinct identities, a mechanism, and a blend
    weight uniform in `blend_range`.
    """
    lo, hi = blend_range
    if not (0.0 <= lo <= hi <= 1.0):
        raise InvalidRange(f"blend range [{lo}, {hi}] not within [0, 1] or inverted")
    if n_ids < 2:
        raise InvalidRange("at least two identities are needed to simulate swaps")
    mechanisms = tuple(m for m in MECHANISMS if m in set(mechanisms))
    if not mechanisms:
        raise InvalidRange("no known swap mechanism selected")
    cfg = BenchmarkConfig(
        n_ids=n_ids,
        per_id_train=per_id_train,
        n_real_test=n_real_test,
        n_fake_test=n_fake_test,
        blend_range=(float(lo), float(hi)),
        mechanisms=mechanisms,
        seed=seed,
        **overrides,
    )
    rng = np.random.default_rng(seed)
    protos = sample_prototypes(n_ids, rng, cfg.margin)
    ids = IdentitySet(tuple(p.identity for p in protos))
    rcfg, ranges = cfg.render, cfg.attributes
    records, images, attrs_by_path = [], {}, {}

    def add(rec, img, attrs):
        records.append(rec)
        images[rec.path] = to_uint8(img)
        attrs_by_path[rec.path] = attrs

    for proto in protos:
        for j in range(per_id_train):
            a = ranges.sample(rng)
            add(SampleRecord(f"real/{proto.identity}/train_{j:03d}.png", proto.identity, False, split="train"),
                render_real(proto, a, rcfg), a)
    for j in range(n_real_test):
        proto = protos[j % n_ids]
        a = ranges.sample(rng)
        add(SampleRecord(f"real/{proto.identity}/test_{j:05d}.png", proto.identity, False, split="test"),
            render_real(proto, a, rcfg), a)
    for j in range(n_fake_test):
        si, ti = rng.choice(n_ids, size=2, replace=False)
        mech = mechanisms[int(rng.integers(len(mechanisms)))]
        lam = float(rng.uniform(lo, hi))
        a = ranges.sample(rng)
        spec = SwapSpec(protos[si], protos[ti], a, lam, mech)
        add(SampleRecord(
            f"fake/{mech}/{j:05d}.png", None, True, protos[si].identity, protos[ti].identity,
            split="test", mechanism=mech, blend=round(lam, 6),
        ), render_swap(spec, rcfg), a)
    manifest = DatasetManifest(tuple(records), ids)
    return Benchmark(manifest, images, {p.identity: p for p in protos}, cfg, attrs_by_path)


def config_digest(cfg: BenchmarkConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]
