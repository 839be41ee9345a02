"""On-disk sequence datasets.

Layout::

    root/manifest.json
    root/seq_<k>/frame_<i>.tns          image
    root/seq_<k>/frame_<i>_aorta.tns    aorta (lumen) mask
    root/seq_<k>/frame_<i>_cath.tns     catheter mask

Frames whose catheter mask is empty are listed under ``filtered`` in the
manifest and are skipped by :func:`training_indices`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synth import FrameSample, SequenceSpec, generate_sequence, random_spec
from .tensorio import TensorFormatError, read_tensor, write_tensor

FORMAT_VERSION = 1


class DatasetError(RuntimeError):
    """A dataset directory is missing, inconsistent, or holds a corrupt file."""


@dataclass
class SequenceRecord:
    frames: list
    spec: SequenceSpec | None = None
    split: str = "train"
    name: str = ""
    filtered: list = field(default_factory=list)

    @property
    def seed(self) -> int | None:
        return None if self.spec is None else self.spec.seed


def filtered_indices(frames) -> list[int]:
    """Indices of frames without a single catheter pixel."""
    return [i for i, f in enumerate(frames) if not np.any(f.catheter_mask > 0)]


def training_indices(record: SequenceRecord) -> list[int]:
    drop = set(record.filtered)
    return [i for i in range(len(record.frames)) if i not in drop]


def generate_dataset(n_train: int, n_val: int, frames: int = 8, image_size: int = 64,
                     seed: int = 0, **spec_overrides) -> list[SequenceRecord]:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=n_train + n_val)
    out = []
    for k, s in enumerate(seeds):
        spec = random_spec(int(s), frames=frames, image_size=image_size, **spec_overrides)
        seq = generate_sequence(spec)
        out.append(SequenceRecord(seq, spec, "train" if k < n_train else "val", f"seq_{k}",
                                  filtered_indices(seq)))
    return out


def write_dataset(sequences, root) -> dict:
    """Write sequences and a manifest under ``root``; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    total = n_filtered = 0
    intensity_sum = 0.0
    for k, rec in enumerate(sequences):
        if not isinstance(rec, SequenceRecord):
            rec = SequenceRecord(list(rec))
        name = rec.name or f"seq_{k}"
        d = root / name
        for i, f in enumerate(rec.frames):
            write_tensor(d / f"frame_{i}.tns", f.image)
            write_tensor(d / f"frame_{i}_aorta.tns", f.aorta_mask)
            write_tensor(d / f"frame_{i}_cath.tns", f.catheter_mask)
            intensity_sum += float(np.mean(f.image))
        filtered = filtered_indices(rec.frames)
        entries.append({
            "directory": name,
            "frames": len(rec.frames),
            "split": rec.split,
            "seed": rec.seed,
            "filtered": filtered,
            "spec": None if rec.spec is None else rec.spec.to_dict(),
        })
        total += len(rec.frames)
        n_filtered += len(filtered)
    manifest = {
        "format_version": FORMAT_VERSION,
        "sequences": entries,
        "statistics": {
            "sequences": len(entries),
            "frames": total,
            "filtered_frames": n_filtered,
            "mean_intensity": intensity_sum / total if total else 0.0,
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest


def read_dataset(root, split: str | None = None) -> list[SequenceRecord]:
    root = Path(root)
    manifest = read_manifest(root)
    out = []
    for entry in manifest["sequences"]:
        if split not in (None, "all") and entry.get("split") != split:
            continue
        d = root / entry["directory"]
        frames = []
        try:
            for i in range(entry["frames"]):
                frames.append(FrameSample(read_tensor(d / f"frame_{i}.tns"),
                                          read_tensor(d / f"frame_{i}_aorta.tns"),
                                          read_tensor(d / f"frame_{i}_cath.tns"), i))
        except TensorFormatError as exc:
            raise DatasetError(str(exc)) from exc
        spec = SequenceSpec.from_dict(entry["spec"]) if entry.get("spec") else None
        rec = SequenceRecord(frames, spec, entry.get("split", "train"), entry["directory"], list(entry["filtered"]))
        if filtered_indices(frames) != rec.filtered:
            raise DatasetError(f"{d}: manifest filtered list does not match the stored masks")
        out.append(rec)
    return out
