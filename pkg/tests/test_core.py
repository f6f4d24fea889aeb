import numpy as np
import pytest

from idconfusion.core import (
    CorruptCheckpoint,
    DatasetManifest,
    IdentitySet,
    InsufficientSamples,
    ManifestError,
    SampleRecord,
    VersionMismatch,
    read_checkpoint,
    sample_training_set,
    write_checkpoint,
)


def make_manifest(n_ids=2, reals=12, fakes=3):
    ids = IdentitySet(tuple(f"id{i}" for i in range(n_ids)))
    recs = [SampleRecord(f"real/id{i}/{j}.png", f"id{i}") for i in range(n_ids) for j in range(reals)]
    recs += [SampleRecord(f"fake/{k}.png", None, True, "id0", "id1", quality_tag="qf90") for k in range(fakes)]
    return DatasetManifest(tuple(recs), ids)


def test_identity_set_bijection():
    ids = IdentitySet(("b", "a", "c"))
    assert [ids.index(lab) for lab in ids.labels] == [0, 1, 2]
    assert ids.label(ids.index("c")) == "c"
    with pytest.raises(ValueError):
        IdentitySet(("a", "a"))
    with pytest.raises(ValueError):
        IdentitySet(())


def test_record_invariants():
    with pytest.raises(ManifestError):
        SampleRecord("x.png")  # real without identity
    with pytest.raises(ManifestError):
        SampleRecord("x.png", "a", source_id="b")
    with pytest.raises(ManifestError):
        SampleRecord("x.png", None, True, "a")


def test_manifest_rejects_unknown_identity_and_train_fakes():
    ids = IdentitySet(("a",))
    with pytest.raises(ManifestError):
        DatasetManifest((SampleRecord("x.png", "b"),), ids)
    ids2 = IdentitySet(("a", "b"))
    with pytest.raises(ManifestError):
        DatasetManifest((SampleRecord("x.png", None, True, "a", "b", split="train"),), ids2)


def test_manifest_roundtrip_is_idempotent(tmp_path):
    m = make_manifest()
    text = m.dumps()
    again = DatasetManifest.loads(text)
    assert again == m
    assert again.dumps() == text
    m.save(tmp_path / "m.jsonl")
    assert DatasetManifest.load(tmp_path / "m.jsonl").identity_set.labels == m.identity_set.labels


def test_manifest_normalizes_loose_input():
    loose = (
        '{"format": "idconfusion-manifest", "version": 1, "identities": ["a", "b"]}\n'
        '{"path": "r.png", "identity": "a", "is_fake": "false", "source_id": "", "target_id": "", "quality_tag": "", "split": "test"}\n'
        '{"path": "f.png", "is_fake": "true", "source_id": "a", "target_id": "b"}\n'
    )
    once = DatasetManifest.loads(loose).dumps()
    assert DatasetManifest.loads(once).dumps() == once


def test_sample_training_set_counts():
    out = sample_training_set(make_manifest(reals=12), per_identity=10, seed=0)
    train, test = out.train, out.test
    assert len(train) == 20
    assert len([r for r in test if not r.is_fake]) == 4
    assert len([r for r in test if r.is_fake]) == 3
    assert {r.path for r in train}.isdisjoint({r.path for r in test})


def test_sample_training_set_zero_and_determinism():
    m = make_manifest()
    out = sample_training_set(m, 0, seed=1)
    assert out.train == [] and len(out.test) == len(m)
    a = sample_training_set(m, 5, seed=42)
    b = sample_training_set(m, 5, seed=42)
    assert [r.path for r in a.train] == [r.path for r in b.train]


def test_sample_training_set_insufficient():
    with pytest.raises(InsufficientSamples) as exc:
        sample_training_set(make_manifest(reals=3), 10, seed=0)
    assert exc.value.identity == "id0"


def test_sample_training_set_varies_with_seed():
    m = make_manifest(reals=12)
    selections = {tuple(r.path for r in sample_training_set(m, 10, seed=s).train) for s in range(100)}
    assert len(selections) > 1


def test_every_output_is_disjoint():
    m = make_manifest(n_ids=3, reals=15)
    for s in range(20):
        out = sample_training_set(m, 7, seed=s)
        train = {r.path for r in out.train}
        for r in out.test:
            assert r.path not in train
        assert all(not r.is_fake for r in out.train)


def test_checkpoint_container_roundtrip(tmp_path):
    p = tmp_path / "c.bin"
    write_checkpoint(p, {"a": b"hello", "b": b""})
    assert read_checkpoint(p) == {"a": b"hello", "b": b""}


def test_checkpoint_version_and_corruption(tmp_path):
    p = tmp_path / "c.bin"
    write_checkpoint(p, {"a": b"payload" * 10}, version=99)
    with pytest.raises(VersionMismatch):
        read_checkpoint(p)
    write_checkpoint(p, {"a": b"payload" * 10})
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(p)
    p.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(p)
    flipped = bytearray(data)
    flipped[-1] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(p)
