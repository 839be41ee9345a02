"""Training, inference, evaluation and baseline runs on datasets stored on disk.

All functions are deterministic under ``(config, seed)``.  Reports never
contain wall-clock times so that repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import ReferenceMemory
from .baseline import BaselineInapplicable, extract_catheter
from .config import RunConfig
from .dataset import SequenceRecord, training_indices
from .head import binarize
from .losses import combined_loss
from .metrics import BBox, average_precision, dsc_metric, mae_metric, mask_to_bbox, mean_ap
from .model import Reference, TemporalSegmenter
from .optim import Adam
from .synth import augment, random_augment_params
from .tensorio import load_arrays, read_tensor, save_arrays, write_tensor

LOG_HEADER = ["step", "epoch", "sequence", "frame", "loss", "dice", "bce", "mse"]


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


# ---------------------------------------------------------------------------
# training


def reference_frames(search: int, gap: int = 2, memory: int = 1):
    """``(intermediate, memory_frames)`` used as references for ``search``."""
    inter = max(search - gap, 0)
    mem = [i for i in range(max(1, search - memory), search)] if memory else []
    return inter, mem


def training_samples(records) -> list[tuple[int, int]]:
    return [(k, s) for k, rec in enumerate(records) for s in training_indices(rec) if s >= 1]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def sample_at(samples, seed: int, step: int) -> tuple[int, tuple[int, int]]:
    """Epoch number and sample visited at global ``step`` (0-based)."""
    epoch, pos = divmod(step, len(samples))
    return epoch, samples[int(epoch_order(len(samples), seed, epoch)[pos])]


def _frames_for(rec: SequenceRecord, idx, cfg: RunConfig, step: int):
    frames = [rec.frames[i] for i in idx]
    if cfg.augment:
        params = random_augment_params(np.random.default_rng([cfg.seed, step, 7]), cfg.image_size)
        frames = [augment(f, **params) for f in frames]
    return [f.image for f in frames], [f.mask(cfg.target) for f in frames]


def train_step(model: TemporalSegmenter, opt: Adam, rec: SequenceRecord, s: int, cfg: RunConfig, step: int):
    inter, mem = reference_frames(s, cfg.short_term_gap, cfg.train_memory)
    images, masks = _frames_for(rec, [s, 0, inter, *mem], cfg, step)
    opt.zero_grad()
    pred = model.forward(images[0], images[1], masks[1], images[2], masks[2], images[3:], masks[3:])
    loss, parts = combined_loss(pred, masks[0][None], cfg.loss)
    value = loss.item()
    if not math.isfinite(value):
        raise ag.NumericalError(f"non-finite loss {value} at step {step}")
    ag.backward(loss)
    opt.step()
    return value, parts


@dataclass
class TrainResult:
    model: TemporalSegmenter
    steps: int
    epochs: int
    log: list


def save_checkpoint(path, model: TemporalSegmenter, opt: Adam, step: int, cfg: RunConfig) -> None:
    path = Path(path)
    save_arrays(path / "model", model.state_dict())
    save_arrays(path / "optim", opt.state_arrays())
    state = {"step": step, "model": model.config.to_dict(), "config": cfg.to_dict()}
    (path / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, seed: int | None = None):
    """Model and raw state dict (step, model config) from a checkpoint directory."""
    from .model import ModelConfig

    path = Path(path)
    try:
        state = json.loads((path / "state.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{path}: no checkpoint state.json") from exc
    mc = state["model"]
    mc = ModelConfig(**{**mc, "widths": tuple(mc["widths"]), "decoder_widths": tuple(mc["decoder_widths"])})
    model = TemporalSegmenter(mc, seed or 0)
    model.load_state_dict(load_arrays(path / "model"))
    return model, state


def train(records, cfg: RunConfig, checkpoint=None, resume: bool = True, log_path=None) -> TrainResult:
    """Train on ``records``; stops after ``epochs`` epochs or ``max_steps`` steps.

    With ``resume`` and an existing checkpoint, training continues from the
    stored step and reproduces the uninterrupted trajectory exactly.
    """
    samples = training_samples(records)
    if not samples:
        raise ValueError("no trainable frames in the training split")
    total = len(samples) * cfg.epochs
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    model = TemporalSegmenter(cfg.model, cfg.seed)
    opt = Adam(model.named_parameters(), cfg.lr)
    step = 0
    ckpt = Path(checkpoint) if checkpoint else None
    if ckpt and resume and (ckpt / "state.json").exists():
        loaded, state = load_checkpoint(ckpt)
        model.load_state_dict(loaded.state_dict())
        step = int(state["step"])
        opt.load_state_arrays(load_arrays(ckpt / "optim"), step)
    log = []
    if log_path is not None and step == 0:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text(",".join(LOG_HEADER) + "\n", encoding="utf-8")
    every = cfg.checkpoint_every * len(samples)
    while step < total:
        epoch, (k, s) = sample_at(samples, cfg.seed, step)
        value, parts = train_step(model, opt, records[k], s, cfg, step)
        row = [step, epoch, records[k].name or str(k), s, value, parts["dice"], parts["bce"], parts["mse"]]
        log.append(row)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(",".join(str(v) if i < 4 else _fmt(v) for i, v in enumerate(row)) + "\n")
        step += 1
        if ckpt and (step % every == 0 or step == total):
            save_checkpoint(ckpt, model, opt, step, cfg)
    if ckpt and step == 0:
        save_checkpoint(ckpt, model, opt, 0, cfg)
    return TrainResult(model, step, -(-step // len(samples)), log)


# ---------------------------------------------------------------------------
# inference


def confidence_dice(prob) -> float:
    """Soft Dice between a probability map and its own binarisation."""
    p = np.asarray(prob, dtype=np.float64)
    b = (p >= 0.5).astype(np.float64)
    denom = b.sum() + p.sum()
    return 1.0 if denom == 0 else float(2.0 * (b * p).sum() / denom)


@dataclass
class SequencePrediction:
    probabilities: list
    masks: list
    memory: ReferenceMemory

    @property
    def trace(self) -> list:
        return self.memory.trace


def infer_sequence(model: TemporalSegmenter, frames, initial_mask, capacity: int = 3,
                   threshold: float = 0.7, truth_masks=None) -> SequencePrediction:
    """Predict every frame after the first, which uses ``initial_mask``.

    The short-term reference is the most recent memory entry (the initial
    frame while memory is empty).  Memory admission uses the confidence Dice
    of each prediction, or the Dice against ``truth_masks`` when given.
    """
    images = np.stack([f.image if hasattr(f, "image") else f for f in frames])
    memory = ReferenceMemory(capacity, threshold)
    init = np.asarray(initial_mask, dtype=np.float32)
    probs, masks = [init.copy()], [init.copy()]
    with ag.no_grad():
        feats = model.features(images)
        initial = Reference(feats[0], init)
        for t in range(1, len(images)):
            latest = memory.latest
            st = initial if latest is None else Reference(latest.features, latest.mask)
            p = model.predict(feats[t], initial, st, [Reference(e.features, e.mask) for e in memory]).data[0]
            m = binarize(p)
            probs.append(p.astype(np.float32))
            masks.append(m)
            score = dsc_metric(m, truth_masks[t]) if truth_masks is not None else confidence_dice(p)
            memory.update(feats[t], m, score, t)
    return SequencePrediction(probs, masks, memory)


def write_predictions(root, name: str, pred: SequencePrediction) -> None:
    d = Path(root) / name
    for i, (p, m) in enumerate(zip(pred.probabilities, pred.masks)):
        write_tensor(d / f"prob_{i}.tns", p)
        write_tensor(d / f"mask_{i}.tns", m)
    (d / "memory_trace.json").write_text(json.dumps(pred.trace, indent=2) + "\n", encoding="utf-8")


def read_predictions(root, name: str, n_frames: int):
    d = Path(root) / name
    return ([read_tensor(d / f"prob_{i}.tns") for i in range(n_frames)],
            [read_tensor(d / f"mask_{i}.tns") for i in range(n_frames)])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    rows: list          # (sequence, frame, dsc, mae)
    ap50: float
    ap75: float
    map: float
    config: dict | None = None
    runtime: float | None = None

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_mae(self) -> float:
        return float(np.mean([r[3] for r in self.rows])) if self.rows else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "frame", "dsc", "mae"])
        for seq, frame, dsc, mae in self.rows:
            w.writerow([seq, frame, _fmt(dsc), _fmt(mae)])
        w.writerow([])
        w.writerow(["ap50", "ap75", "map"])
        w.writerow([_fmt(self.ap50), _fmt(self.ap75), _fmt(self.map)])
        return buf.getvalue()


def detection(prob, mask):
    """Scored box for a predicted mask; score is the mean probability inside it."""
    box = mask_to_bbox(mask)
    if box is None:
        return []
    return [(float(np.mean(np.asarray(prob)[np.asarray(mask) > 0.5])), box.extent())]


def truth_box(mask) -> BBox | None:
    box = mask_to_bbox(mask)
    return None if box is None else box.extent()


def evaluate(entries) -> MetricsReport:
    """``entries``: iterable of ``(sequence, frame, prob, pred_mask, truth_mask)``."""
    rows, dets, truths = [], [], []
    for seq, frame, prob, mask, truth in entries:
        rows.append((seq, frame, dsc_metric(mask, truth), mae_metric(prob, truth)))
        dets.append(detection(prob, mask))
        truths.append(truth_box(truth))
    return MetricsReport(rows, average_precision(dets, truths, 0.5), average_precision(dets, truths, 0.75),
                         mean_ap(dets, truths))


def evaluation_entries(records, pred_root, target: str):
    for rec in records:
        probs, masks = read_predictions(pred_root, rec.name, len(rec.frames))
        for i in range(1, len(rec.frames)):
            yield rec.name, i, probs[i], masks[i], rec.frames[i].mask(target)


# ---------------------------------------------------------------------------
# clustering baseline

BASELINE_HEADER = ["sequence", "frame", "status", "n_points", "cx", "cy", "var_rms_0", "var_rms_1",
                   "selected", "dsc", "mae"]


def baseline_rows(records, aorta_root=None, level: float = 0.7, seed: int = 0, out=None) -> list:
    """Per-frame cluster baseline; aorta masks come from ``aorta_root`` or ground truth."""
    rows = []
    for rec in records:
        aortas = (read_predictions(aorta_root, rec.name, len(rec.frames))[1] if aorta_root
                  else [f.aorta_mask for f in rec.frames])
        for i, f in enumerate(rec.frames):
            try:
                mask, res, idx = extract_catheter(f.image, aortas[i], level, seed)
            except BaselineInapplicable:
                rows.append([rec.name, i, "inapplicable"] + [""] * 8)
                continue
            c = res.centroids[idx]
            rows.append([rec.name, i, "ok", len(res.points), _fmt(c[0]), _fmt(c[1]), _fmt(res.var_rms[0]),
                         _fmt(res.var_rms[1]), idx, _fmt(dsc_metric(mask, f.catheter_mask)),
                         _fmt(mae_metric(mask, f.catheter_mask))])
            if out is not None:
                write_tensor(Path(out) / rec.name / f"baseline_{i}.tns", mask)
    return rows


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
