import json

import numpy as np
import pytest

from cathseg.dataset import (DatasetError, SequenceRecord, filtered_indices, generate_dataset, read_dataset,
                             read_manifest, training_indices, write_dataset)
from cathseg.synth import CatheterPath, SequenceSpec, generate_sequence
from cathseg.tensorio import TensorFormatError


@pytest.fixture
def small(tmp_path):
    recs = generate_dataset(2, 1, frames=4, image_size=32, seed=3)
    return recs, write_dataset(recs, tmp_path), tmp_path


def test_round_trip_is_bit_exact(small):
    recs, _, root = small
    back = read_dataset(root)
    assert [r.name for r in back] == [r.name for r in recs]
    for a, b in zip(recs, back):
        assert b.spec == a.spec and b.split == a.split
        for fa, fb in zip(a.frames, b.frames):
            for attr in ("image", "aorta_mask", "catheter_mask"):
                assert getattr(fa, attr).tobytes() == getattr(fb, attr).tobytes()


def test_manifest_counts(small):
    recs, manifest, root = small
    assert json.loads(json.dumps(manifest)) == read_manifest(root)
    assert manifest["statistics"]["frames"] == sum(len(r.frames) for r in recs) == 12
    assert [e["frames"] for e in manifest["sequences"]] == [4, 4, 4]
    assert sorted(p.name for p in root.iterdir() if p.is_dir()) == ["seq_0", "seq_1", "seq_2"]
    assert [r.name for r in read_dataset(root, "val")] == ["seq_2"]


def test_generation_is_deterministic(tmp_path):
    a = write_dataset(generate_dataset(2, 0, frames=3, image_size=32, seed=9), tmp_path / "a")
    b = write_dataset(generate_dataset(2, 0, frames=3, image_size=32, seed=9), tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert a == b


def test_absent_catheter_frames_are_filtered(tmp_path):
    spec = SequenceSpec(frames=10, catheter=CatheterPath(absent_frames=(2, 5, 9)))
    frames = generate_sequence(spec)
    manifest = write_dataset([SequenceRecord(frames, spec, "train", "seq_0", filtered_indices(frames))], tmp_path)
    assert manifest["sequences"][0]["filtered"] == [2, 5, 9]
    assert manifest["sequences"][0]["filtered"] == [i for i, f in enumerate(frames) if f.catheter_mask.sum() == 0]
    rec = read_dataset(tmp_path)[0]
    kept = training_indices(rec)
    assert kept == [0, 1, 3, 4, 6, 7, 8]
    assert all(rec.frames[i].catheter_mask.any() for i in kept)


def test_corrupt_frame_reports_path(small):
    _, _, root = small
    (root / "seq_1" / "frame_2.tns").write_bytes(b"garbage")
    with pytest.raises((TensorFormatError, DatasetError), match="frame_2.tns"):
        read_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest.json"):
        read_dataset(tmp_path)


def test_manifest_filter_mismatch_detected(small):
    _, _, root = small
    m = json.loads((root / "manifest.json").read_text())
    m["sequences"][0]["filtered"] = [1]
    (root / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError):
        read_dataset(root)


def test_mean_intensity_statistic(small):
    recs, manifest, _ = small
    expected = np.mean([float(np.mean(f.image)) for r in recs for f in r.frames])
    assert abs(manifest["statistics"]["mean_intensity"] - expected) < 1e-12
