"""Synthetic event-camera scenes of moving bright shapes on a dark background.

Each object's boundary emits events at a rate proportional to the speed of
the boundary along its normal: a leading edge brightens pixels (polarity 1),
a trailing edge darkens them (polarity 0).  Uniform background noise is
added on top.  Ground-truth boxes are the shapes' bounding boxes at the end
of each labelled window.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .events import Annotation, frames_to_input, make_stream, stack_events
from .tensor import ConfigError

__all__ = ["SHAPES", "SyntheticSceneConfig", "SceneObject", "synth_generate", "scene_sample",
           "make_dataset"]

SHAPES = ("disc", "rectangle", "ring")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 5
    classes: tuple = SHAPES
    size_range: tuple = (6.0, 12.0)
    speed_range: tuple = (0.05, 0.15)
    edge_rate: float = 2.0
    noise_rate: float = 2.0
    duration_ms: float = 50.0
    frames: int = 1
    max_overlap: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ConfigError("object count range must satisfy 0 <= min <= max")
        if any(c not in SHAPES for c in self.classes):
            raise ConfigError(f"classes must be drawn from {SHAPES}")
        if self.duration_ms <= 0 or self.frames < 1:
            raise ConfigError("duration and frame count must be positive")
        if self.edge_rate < 0 or self.noise_rate < 0:
            raise ConfigError("event rates must be nonnegative")
        lo, hi = self.size_range
        if not 0 < lo <= hi or 2 * hi + 2 > min(self.height, self.width):
            raise ConfigError(f"size range {self.size_range} does not fit a {self.height}x{self.width} canvas")

    def with_seed(self, seed: int) -> "SyntheticSceneConfig":
        d = asdict(self)
        d["seed"] = seed
        d["classes"] = tuple(d["classes"])
        return SyntheticSceneConfig(**d)

    @property
    def frame_period_ms(self) -> float:
        return self.duration_ms / self.frames


@dataclass
class SceneObject:
    shape: str
    cls: int
    center: np.ndarray
    velocity: np.ndarray
    half: np.ndarray

    def center_at(self, t_ms: float) -> np.ndarray:
        return self.center + self.velocity * t_ms

    def box_at(self, t_ms: float) -> np.ndarray:
        c = self.center_at(t_ms)
        return np.concatenate([c - self.half, c + self.half])

    def boundary(self, spacing: float = 0.5):
        """Boundary points relative to the centre and unit normals pointing out of the bright region."""
        if self.shape in ("disc", "ring"):
            pts, nrm = _circle(self.half[0], spacing)
            if self.shape == "ring":
                inner, inner_n = _circle(0.5 * self.half[0], spacing)
                pts, nrm = np.concatenate([pts, inner]), np.concatenate([nrm, -inner_n])
            return pts, nrm, spacing
        hx, hy = self.half
        xs = np.arange(-hx + spacing / 2, hx, spacing)
        ys = np.arange(-hy + spacing / 2, hy, spacing)
        pts = np.concatenate([
            np.stack([xs, np.full_like(xs, -hy)], 1), np.stack([xs, np.full_like(xs, hy)], 1),
            np.stack([np.full_like(ys, -hx), ys], 1), np.stack([np.full_like(ys, hx), ys], 1)])
        nrm = np.concatenate([
            np.tile([0.0, -1.0], (len(xs), 1)), np.tile([0.0, 1.0], (len(xs), 1)),
            np.tile([-1.0, 0.0], (len(ys), 1)), np.tile([1.0, 0.0], (len(ys), 1))])
        return pts, nrm, spacing


def _circle(radius: float, spacing: float):
    n = max(int(np.ceil(2 * np.pi * radius / spacing)), 8)
    ang = (np.arange(n) + 0.5) * 2 * np.pi / n
    nrm = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return radius * nrm, nrm


def _sample_objects(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> list:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n):
        for _attempt in range(200):
            cls = int(rng.integers(len(cfg.classes)))
            shape = cfg.classes[cls]
            size = rng.uniform(*cfg.size_range)
            if shape == "rectangle":
                half = np.array([size, size * rng.uniform(0.5, 1.0)])
                if rng.random() < 0.5:
                    half = half[::-1].copy()
            else:
                half = np.array([size, size])
            angle = rng.uniform(0, 2 * np.pi)
            velocity = rng.uniform(*cfg.speed_range) * np.array([np.cos(angle), np.sin(angle)])
            lo = half + 1.0
            hi = np.array([cfg.width, cfg.height]) - half - 1.0
            start_lo = np.maximum(lo, lo - velocity * cfg.duration_ms)
            start_hi = np.minimum(hi, hi - velocity * cfg.duration_ms)
            if np.any(start_hi <= start_lo):
                continue
            center = rng.uniform(start_lo, start_hi)
            obj = SceneObject(shape, cls, center, velocity, half)
            mid = cfg.duration_ms / 2
            if all(_overlap(obj.box_at(mid), o.box_at(mid)) <= cfg.max_overlap for o in objects):
                objects.append(obj)
                break
    return objects


def _overlap(a, b) -> float:
    iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
    ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def synth_generate(cfg: SyntheticSceneConfig, objects: list | None = None):
    """Generate ``(EventStream, [(frame_id, [Annotation, ...]), ...])``.

    ``objects`` overrides random object sampling (used for controlled scenes).
    """
    rng = np.random.default_rng(cfg.seed)
    if objects is None:
        objects = _sample_objects(cfg, rng)
    duration_us = int(round(cfg.duration_ms * 1000))
    cols = [[], [], [], []]
    for obj in objects:
        speed = float(np.hypot(*obj.velocity))
        if speed == 0 or cfg.edge_rate == 0:
            continue
        pts, nrm, ds = obj.boundary()
        vn = nrm @ obj.velocity
        # sub-steps short enough that an edge moves at most a quarter pixel
        n_steps = max(int(np.ceil(speed * cfg.duration_ms / 0.25)), 1)
        dt = cfg.duration_ms / n_steps
        lam = cfg.edge_rate * np.abs(vn) * dt * ds
        counts = rng.poisson(np.broadcast_to(lam, (n_steps, len(lam))))
        step_idx, pt_idx = np.nonzero(counts)
        reps = counts[step_idx, pt_idx]
        step_idx, pt_idx = np.repeat(step_idx, reps), np.repeat(pt_idx, reps)
        t_ms = (step_idx + rng.random(len(step_idx))) * dt
        pos = obj.center[None, :] + obj.velocity[None, :] * t_ms[:, None] + pts[pt_idx]
        x = np.clip(np.floor(pos[:, 0]), 0, cfg.width - 1)
        y = np.clip(np.floor(pos[:, 1]), 0, cfg.height - 1)
        cols[0].append(np.minimum((t_ms * 1000).astype(np.int64), duration_us - 1))
        cols[1].append(x)
        cols[2].append(y)
        cols[3].append((vn[pt_idx] > 0).astype(np.uint8))
    n_noise = rng.poisson(cfg.noise_rate * cfg.height * cfg.width * cfg.duration_ms / 1000.0)
    if n_noise:
        cols[0].append(rng.integers(0, duration_us, n_noise))
        cols[1].append(rng.integers(0, cfg.width, n_noise))
        cols[2].append(rng.integers(0, cfg.height, n_noise))
        cols[3].append(rng.integers(0, 2, n_noise).astype(np.uint8))
    if cols[0]:
        t, x, y, p = (np.concatenate(c) for c in cols)
        order = np.argsort(t, kind="stable")
        stream = make_stream(t[order], x[order], y[order], p[order], cfg.width, cfg.height)
    else:
        stream = make_stream([], [], [], [], cfg.width, cfg.height)
    labels = []
    for f in range(cfg.frames):
        t_end = (f + 1) * cfg.frame_period_ms
        anns = []
        for obj in objects:
            b = obj.box_at(t_end)
            anns.append(Annotation(float(b[0]), float(b[1]), float(b[2]), float(b[3]), obj.cls))
        labels.append((str(f), anns))
    return stream, labels


def frame_window_us(cfg: SyntheticSceneConfig, frame: int) -> tuple:
    period = cfg.frame_period_ms * 1000
    return int(round(frame * period)), int(round((frame + 1) * period))


def scene_sample(cfg: SyntheticSceneConfig, bins: int = 5, count_clip: float = 255.0, frame: int = 0):
    """Model-ready sample: ``(input 2B x H x W, xyxy boxes G x 4, classes G)``."""
    stream, labels = synth_generate(cfg)
    t0, t1 = frame_window_us(cfg, frame)
    frames = stack_events(stream, t0, t1, bins, cfg.height, cfg.width)
    anns = labels[frame][1]
    boxes = np.array([a.box for a in anns], dtype=float).reshape(-1, 4)
    classes = np.array([a.cls for a in anns], dtype=int)
    return frames_to_input(frames.counts, count_clip), boxes, classes


def make_dataset(cfg: SyntheticSceneConfig, n: int, first_seed: int, bins: int = 5,
                 count_clip: float = 255.0):
    """Stack ``n`` scenes seeded ``first_seed, first_seed + 1, ...``."""
    inputs, boxes, classes = [], [], []
    for i in range(n):
        x, b, c = scene_sample(cfg.with_seed(first_seed + i), bins, count_clip)
        inputs.append(x)
        boxes.append(b)
        classes.append(c)
    return np.stack(inputs) if inputs else np.zeros((0, 2 * bins, cfg.height, cfg.width)), boxes, classes
