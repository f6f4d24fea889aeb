"""Shared types, dataset manifests, training-set sampling and checkpoint files."""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


class IdConfusionError(Exception):
    """Base class for errors raised by this package."""


class InvalidRange(IdConfusionError, ValueError):
    pass


class InsufficientSamples(IdConfusionError):
    def __init__(self, identity, have=None, need=None):
        self.identity = identity
        super().__init__(f"identity {identity!r} has {have} real records, needs {need}")


class ManifestError(IdConfusionError, ValueError):
    pass


class VersionMismatch(IdConfusionError):
    pass


class CorruptCheckpoint(IdConfusionError):
    pass


class ShapeMismatch(IdConfusionError, ValueError):
    pass


def validate_image(pixels: np.ndarray, shape: Optional[tuple] = None) -> np.ndarray:
    """Return `pixels` as float HxWxC after checking range and (optionally) shape."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected HxWxC image, got shape {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeMismatch(f"expected image shape {tuple(shape)}, got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all()):
        raise ValueError("pixel values must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class IdentitySet:
    labels: tuple

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        if not labels:
            raise ValueError("an identity set needs at least one label")
        if len(set(labels)) != len(labels):
            raise ValueError("identity labels must be unique")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})

    @property
    def K(self) -> int:
        return len(self.labels)

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._index

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown identity {label!r}") from None

    def label(self, i: int) -> str:
        return self.labels[i]

    def subset(self, labels: Iterable[str]) -> "IdentitySet":
        keep = set(labels)
        return IdentitySet(tuple(lab for lab in self.labels if lab in keep))


RECORD_FIELDS = ("path", "identity", "is_fake", "source_id", "target_id", "quality_tag", "split")
# not part of the core record layout; written only by the synthetic generator
EXTRA_FIELDS = ("mechanism", "blend")


@dataclass(frozen=True)
class SampleRecord:
    path: str
    identity: Optional[str] = None
    is_fake: bool = False
    source_id: Optional[str] = None
    target_id: Optional[str] = None
    quality_tag: str = ""
    split: str = "test"
    mechanism: str = ""
    blend: Optional[float] = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ManifestError(f"{self.path}: split must be train or test, got {self.split!r}")
        if self.is_fake:
            if not self.source_id or not self.target_id:
                raise ManifestError(f"{self.path}: fake records need source_id and target_id")
        else:
            if not self.identity:
                raise ManifestError(f"{self.path}: real records need an identity")
            if self.source_id or self.target_id:
                raise ManifestError(f"{self.path}: real records carry no source/target")

    @property
    def sample_id(self) -> str:
        return self.path

    def referenced_ids(self) -> tuple:
        if self.is_fake:
            return (self.source_id, self.target_id)
        return (self.identity,)

    def to_dict(self) -> dict:
        d = {
            "path": self.path,
            "identity": self.identity or "",
            "is_fake": self.is_fake,
            "source_id": self.source_id or "",
            "target_id": self.target_id or "",
            "quality_tag": self.quality_tag,
            "split": self.split,
        }
        if self.mechanism:
            d["mechanism"] = self.mechanism
        if self.blend is not None:
            d["blend"] = self.blend
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        unknown = set(d) - set(RECORD_FIELDS) - set(EXTRA_FIELDS)
        if unknown:
            raise ManifestError(f"unknown record fields {sorted(unknown)}")
        if "path" not in d:
            raise ManifestError("record without path")
        fake = d.get("is_fake", False)
        if isinstance(fake, str):
            fake = fake.strip().lower() in ("1", "true", "yes")
        blend = d.get("blend")
        return cls(
            path=str(d["path"]),
            identity=d.get("identity") or None,
            is_fake=bool(fake),
            source_id=d.get("source_id") or None,
            target_id=d.get("target_id") or None,
            quality_tag=str(d.get("quality_tag") or ""),
            split=d.get("split") or "test",
            mechanism=str(d.get("mechanism") or ""),
            blend=None if blend in (None, "") else float(blend),
        )


MANIFEST_HEADER = "idconfusion-manifest"


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    identity_set: IdentitySet

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.path in seen:
                raise ManifestError(f"duplicate record path {r.path}")
            seen.add(r.path)
            for ident in r.referenced_ids():
                if ident not in self.identity_set:
                    raise ManifestError(f"{r.path}: identity {ident!r} not in identity set")
            if r.split == "train" and r.is_fake:
                raise ManifestError(f"{r.path}: fake record in the train split")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, split=None, is_fake=None, mechanism=None) -> list:
        out = []
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if is_fake is not None and r.is_fake != is_fake:
                continue
            if mechanism is not None and r.mechanism != mechanism:
                continue
            out.append(r)
        return out

    @property
    def train(self) -> list:
        return self.select(split="train")

    @property
    def test(self) -> list:
        return self.select(split="test")

    def with_records(self, records, identity_set: IdentitySet = None) -> "DatasetManifest":
        return DatasetManifest(tuple(records), identity_set or self.identity_set)

    def dumps(self) -> str:
        head = json.dumps({"format": MANIFEST_HEADER, "version": 1, "identities": list(self.identity_set.labels)})
        lines = [head] + [json.dumps(r.to_dict(), ensure_ascii=False) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ManifestError("empty manifest")
        try:
            head = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise ManifestError(f"bad manifest header: {exc}") from None
        if not isinstance(head, dict) or head.get("format") != MANIFEST_HEADER:
            raise ManifestError("missing manifest header line")
        records = []
        for n, ln in enumerate(lines[1:], start=2):
            try:
                records.append(SampleRecord.from_dict(json.loads(ln)))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {n}: {exc}") from None
        return cls(tuple(records), IdentitySet(tuple(head["identities"])))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def sample_training_set(manifest: DatasetManifest, per_identity: int, seed: int) -> DatasetManifest:
    """Pick `per_identity` real records per identity for training; everything else becomes test.

    Records already in the train split are pooled with the test reals before
    sampling, so the result depends only on the pool and the seed.
    """
    if per_identity < 0:
        raise ValueError("per_identity must be non-negative")
    rng = np.random.default_rng(seed)
    by_id = {lab: [] for lab in manifest.identity_set.labels}
    for i, r in enumerate(manifest.records):
        if not r.is_fake:
            by_id[r.identity].append(i)
    chosen = set()
    for lab in manifest.identity_set.labels:
        pool = by_id[lab]
        if len(pool) < per_identity:
            raise InsufficientSamples(lab, len(pool), per_identity)
        if per_identity:
            chosen.update(pool[k] for k in rng.choice(len(pool), size=per_identity, replace=False))
    out = [replace(r, split="train" if i in chosen else "test") for i, r in enumerate(manifest.records)]
    return manifest.with_records(out)


class DirectoryImages:
    """Reads record images stored under a root directory (the layout written by ``gen``)."""

    def __init__(self, root):
        self.root = Path(root)

    def load(self, record: SampleRecord) -> np.ndarray:
        from PIL import Image

        path = self.root / record.path
        if not path.is_file():
            raise FileNotFoundError(f"missing image {path}")
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64) / 255.0
        return arr[..., None] if arr.ndim == 2 else arr

    def stack(self, records: Iterable[SampleRecord]) -> np.ndarray:
        return np.stack([self.load(r) for r in records])


# -- checkpoint container ---------------------------------------------------

MAGIC = b"IDPF"
FORMAT_VERSION = 1


def pack_arrays(arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def unpack_arrays(blob: bytes) -> dict:
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def write_checkpoint(path, sections: dict, version: int = FORMAT_VERSION) -> None:
    """Write named byte sections behind the IDPF magic and a format version.

    Each section is ``u16 name_len, name, u64 payload_len, u32 crc32, payload``.
    """
    out = bytearray(MAGIC)
    out += struct.pack("<IH", version, len(sections))
    for name, payload in sections.items():
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<QI", len(payload), zlib.crc32(payload)) + payload
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path, version: int = FORMAT_VERSION) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    pos = 4
    try:
        found, count = struct.unpack_from("<IH", data, pos)
        pos += 6
        if found != version:
            raise VersionMismatch(f"checkpoint format_version {found}, expected {version}")
        sections = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            plen, crc = struct.unpack_from("<QI", data, pos)
            pos += 12
            payload = data[pos : pos + plen]
            if len(payload) != plen or zlib.crc32(payload) != crc:
                raise CorruptCheckpoint(f"section {name!r} truncated or damaged")
            pos += plen
            sections[name] = payload
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CorruptCheckpoint("trailing bytes after last section")
    return sections


def encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


def decode_json(blob: bytes):
    return json.loads(blob.decode())

