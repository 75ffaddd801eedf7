"""Datasets, the AdamW optimiser and the training / evaluation loops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .events import frames_to_input, load_annotations, load_events, stack_events
from .metrics import empty_metrics, evaluate_map
from .model import Detector
from .synth import frame_window_us, synth_generate
from .tensor import ConfigError, precision

__all__ = ["SceneDataset", "build_dataset", "AdamW", "lr_at", "temperature_at", "NonFiniteLoss", "TrainResult",
           "train", "evaluate", "load_model"]

log = logging.getLogger(__name__)


@dataclass
class SceneDataset:
    """Clipped event counts plus pixel-space ground truth for each sample."""

    counts: np.ndarray
    boxes: list
    classes: list
    seeds: np.ndarray
    count_clip: float = 255.0

    def __len__(self) -> int:
        return len(self.counts)

    def inputs(self, idx) -> np.ndarray:
        return frames_to_input(self.counts[idx].astype(np.float64), self.count_clip)

    def targets(self, idx) -> tuple:
        idx = np.atleast_1d(idx)
        return [self.boxes[i] for i in idx], [self.classes[i] for i in idx]


def _synthetic(cfg: RunConfig, n: int, first_seed: int) -> SceneDataset:
    d = cfg.data
    h, w = d.resolution
    counts = np.zeros((n, 2 * d.bins, h, w), dtype=np.uint16)
    boxes, classes = [], []
    for i in range(n):
        scene = cfg.scene_config(first_seed + i)
        stream, labels = synth_generate(scene)
        t0, t1 = frame_window_us(scene, 0)
        counts[i] = np.minimum(stack_events(stream, t0, t1, d.bins, h, w).counts, np.iinfo(np.uint16).max)
        anns = labels[0][1]
        boxes.append(np.array([a.box for a in anns], dtype=float).reshape(-1, 4))
        classes.append(np.array([a.cls for a in anns], dtype=int))
    return SceneDataset(counts, boxes, classes, np.arange(first_seed, first_seed + n), d.count_clip)


def _from_files(cfg: RunConfig, events: tuple, annotations: tuple) -> SceneDataset:
    """Each annotated frame ``f`` covers events in ``[f * D, (f + 1) * D)`` microseconds."""
    d = cfg.data
    if len(events) != len(annotations):
        raise ConfigError(f"data: {len(events)} event files but {len(annotations)} annotation files")
    h, w = d.resolution
    period = int(round(d.duration_ms * 1000))
    counts, boxes, classes = [], [], []
    for ev_path, ann_path in zip(events, annotations):
        stream = load_events(ev_path)
        for frame_id, anns in load_annotations(ann_path):
            f = int(frame_id)
            c = stack_events(stream, f * period, (f + 1) * period, d.bins, h, w).counts
            counts.append(np.minimum(c, np.iinfo(np.uint16).max).astype(np.uint16))
            boxes.append(np.array([a.box for a in anns], dtype=float).reshape(-1, 4))
            classes.append(np.array([a.cls for a in anns], dtype=int))
    arr = np.stack(counts) if counts else np.zeros((0, 2 * d.bins, h, w), dtype=np.uint16)
    return SceneDataset(arr, boxes, classes, np.arange(len(arr)), d.count_clip)


def build_dataset(cfg: RunConfig, split: str) -> SceneDataset:
    """The ``"train"`` or ``"eval"`` split described by ``cfg.data``."""
    d = cfg.data
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    if d.source == "files":
        if split == "train":
            return _from_files(cfg, d.train_events, d.train_annotations)
        return _from_files(cfg, d.eval_events, d.eval_annotations)
    if split == "train":
        return _synthetic(cfg, d.train_size, d.train_seed)
    return _synthetic(cfg, d.eval_size, d.eval_seed)


class AdamW:
    """Adam with decoupled weight decay, applied only to parameters of rank >= 2."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999),
                 eps: float = 1e-8, grad_clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params.values()))

    def step(self, lr: float | None = None) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        lr = self.lr if lr is None else lr
        self.t += 1
        norm = self.grad_norm()
        scale = 1.0
        if self.grad_clip and norm > self.grad_clip:
            scale = self.grad_clip / norm
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad * scale
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm


def lr_at(step: int, total: int, base: float, warmup: int = 0) -> float:
    """Linear warmup then cosine decay to zero at ``total``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    return 0.5 * base * (1 + math.cos(math.pi * (step - warmup) / span))


def temperature_at(step: int, total: int, start: float, end: float) -> float:
    """Gumbel-Softmax temperature, annealed linearly from ``start`` to ``end``."""
    if total <= 1:
        return end if total == 1 else start
    return start + (end - start) * step / (total - 1)


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, batch_seed: list, scene_seeds: list, dump: str | None):
        self.step, self.batch_seed, self.scene_seeds, self.dump = step, batch_seed, scene_seeds, dump
        super().__init__(f"non-finite loss at step {step} (batch seed {batch_seed}, scenes {scene_seeds})"
                         + (f"; diagnostics in {dump}" if dump else ""))


@dataclass
class TrainResult:
    model: Detector
    final_loss: float | None
    metrics: dict | None
    history: list = field(default_factory=list)


def _write_row(fh, row):
    if fh is not None:
        fh.write(json.dumps(row) + "\n")
        fh.flush()


def evaluate(model: Detector, data: SceneDataset, cfg: RunConfig) -> dict:
    """Eval-mode mAP over ``data``; empty data gives zero-filled metrics."""
    if len(data) == 0:
        log.warning("evaluation dataset is empty; reporting zero metrics")
        return empty_metrics(cfg.data.num_classes)
    dets = []
    with precision(cfg.precision):
        for start in range(0, len(data), cfg.eval.batch_size):
            idx = np.arange(start, min(start + cfg.eval.batch_size, len(data)))
            dets.extend(model.predict(data.inputs(idx), cfg.eval.batch_size))
    gts = list(zip(data.boxes, data.classes))
    return evaluate_map(dets, gts, cfg.eval.iou_thresholds, cfg.data.num_classes, cfg.eval.score_threshold)


def train(cfg: RunConfig, out_dir=None, train_data: SceneDataset | None = None,
          eval_data: SceneDataset | None = None) -> TrainResult:
    """Train a detector; with ``out_dir`` also write ``metrics.jsonl`` and ``model.ckpt``."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    with precision(cfg.precision):
        model = Detector(cfg.detector_config(), np.random.default_rng(cfg.seed))
        if t.steps and train_data is None:
            train_data = build_dataset(cfg, "train")
        if t.steps and eval_data is None:
            eval_data = build_dataset(cfg, "eval")
        if t.steps and len(train_data) == 0:
            raise ConfigError("data: training split is empty")
        opt = AdamW(model.named_parameters(), t.lr, t.weight_decay, t.betas, grad_clip=t.grad_clip)
        history = []
        final_loss = None
        metrics = None
        fh = open(out / "metrics.jsonl", "w") if out is not None else None
        try:
            model.train()
            for step in range(t.steps):
                batch_seed = [cfg.seed, step]
                rng = np.random.default_rng(batch_seed)
                idx = rng.choice(len(train_data), size=min(t.batch_size, len(train_data)), replace=False)
                temp = temperature_at(step, t.steps, t.temperature_start, t.temperature_end)
                lr = lr_at(step, t.steps, t.lr, t.warmup_steps)
                model.zero_grad()
                boxes, classes = train_data.targets(idx)
                loss, terms = model.loss(train_data.inputs(idx), boxes, classes, rng, temp)
                if not np.isfinite(terms["loss"]):
                    dump = None
                    if out is not None:
                        dump = str(out / "nonfinite_batch.json")
                        with open(dump, "w") as dfh:
                            json.dump({"step": step, "batch_seed": batch_seed, "indices": idx.tolist(),
                                       "scene_seeds": train_data.seeds[idx].tolist(), "terms": terms}, dfh)
                    raise NonFiniteLoss(step, batch_seed, train_data.seeds[idx].tolist(), dump)
                loss.backward()
                gnorm = opt.step(lr)
                final_loss = terms["loss"]
                row = {"step": step + 1, **terms, "lr": lr, "temperature": temp, "grad_norm": gnorm}
                history.append(row)
                if t.log_every and ((step + 1) % t.log_every == 0 or step + 1 == t.steps):
                    _write_row(fh, row)
                    log.info("step %d loss %.4f bbox %.4f cls %.4f", step + 1, terms["loss"], terms["bbox"],
                             terms["cls"])
                if t.eval_every and (step + 1) % t.eval_every == 0 and step + 1 != t.steps:
                    m = evaluate(model, eval_data, cfg)
                    _write_row(fh, {"step": step + 1, "split": "eval", **m})
                    model.train()
            if t.steps:
                metrics = evaluate(model, eval_data, cfg)
                _write_row(fh, {"step": t.steps, "split": "eval", **metrics})
        finally:
            if fh is not None:
                fh.close()
        model.eval()
        if out is not None:
            save_checkpoint(model, out / "model.ckpt")
            if metrics is not None:
                (out / "eval.json").write_text(json.dumps(metrics, indent=2))
    return TrainResult(model, final_loss, metrics, history)


def load_model(cfg: RunConfig, checkpoint) -> Detector:
    with precision(cfg.precision):
        model = Detector(cfg.detector_config(), np.random.default_rng(cfg.seed))
        load_checkpoint(model, checkpoint)
    model.eval()
    return model
