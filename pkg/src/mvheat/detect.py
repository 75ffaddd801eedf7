"""Set-prediction detection: box overlap, matching, IoU-aware loss, query selection, head."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .nn import Module
from .tensor import (ConfigError, Parameter, Tensor, absolute, as_tensor, concat, gelu, getitem,
                     maximum, minimum, sigmoid, softplus)

__all__ = [
    "BoxError",
    "Query",
    "Detection",
    "LossBreakdown",
    "LossWeights",
    "iou",
    "box_iou",
    "generalized_box_iou",
    "cxcywh_to_xyxy",
    "xyxy_to_cxcywh",
    "hungarian_match",
    "brute_force_match",
    "match_cost",
    "detection_loss",
    "iou_query_select",
    "DetectionHead",
]


class BoxError(ValueError):
    """A box violates x1 < x2, y1 < y2 (or w, h > 0)."""


@dataclass
class Query:
    token: int
    score: float
    feature: np.ndarray | None = None
    position: tuple | None = None


@dataclass
class Detection:
    box: np.ndarray
    scores: np.ndarray

    @property
    def label(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def score(self) -> float:
        return float(np.max(self.scores))


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    cls: float = 1.0
    match_cls: float = 1.0


@dataclass
class LossBreakdown:
    total: Tensor
    bbox: Tensor
    cls: Tensor
    matches: list = field(default_factory=list)
    iou_targets: np.ndarray | None = None
    bce_elements: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"total": self.total.item(), "bbox": self.bbox.item(), "cls": self.cls.item()}


def _validate(box, name="box"):
    x1, y1, x2, y2 = box[:4]
    if not (x1 < x2 and y1 < y2):
        raise BoxError(f"degenerate {name} {tuple(box[:4])}: need x1 < x2 and y1 < y2")


def iou(a, b) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    _validate(a, "first box")
    _validate(b, "second box")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``P x 4`` and ``G x 4`` xyxy boxes."""
    a, b = np.asarray(a, float)[:, None, :], np.asarray(b, float)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def generalized_box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a2, b2 = np.asarray(a, float)[:, None, :], np.asarray(b, float)[None, :, :]
    overlap = box_iou(a, b)
    iw = np.clip(np.minimum(a2[..., 2], b2[..., 2]) - np.maximum(a2[..., 0], b2[..., 0]), 0, None)
    ih = np.clip(np.minimum(a2[..., 3], b2[..., 3]) - np.maximum(a2[..., 1], b2[..., 1]), 0, None)
    inter = iw * ih
    union = (a2[..., 2] - a2[..., 0]) * (a2[..., 3] - a2[..., 1]) + (b2[..., 2] - b2[..., 0]) * (b2[..., 3] - b2[..., 1]) - inter
    enclose = ((np.maximum(a2[..., 2], b2[..., 2]) - np.minimum(a2[..., 0], b2[..., 0]))
               * (np.maximum(a2[..., 3], b2[..., 3]) - np.minimum(a2[..., 1], b2[..., 1])))
    return overlap - (enclose - union) / enclose


def hungarian_match(cost) -> list:
    """Minimum-cost one-to-one assignment; returns ``(row, col)`` pairs sorted by row."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def brute_force_match(cost) -> float:
    """Exhaustive minimum assignment cost (small matrices only)."""
    cost = np.asarray(cost, dtype=float)
    p, g = cost.shape
    if p >= g:
        return min(sum(cost[r, c] for c, r in enumerate(rows)) for rows in itertools.permutations(range(p), g))
    return min(sum(cost[r, c] for r, c in enumerate(cols)) for cols in itertools.permutations(range(g), p))


def match_cost(pred_boxes: np.ndarray, pred_scores: np.ndarray, gt_boxes: np.ndarray,
               gt_cls: np.ndarray, weights: LossWeights = LossWeights()) -> np.ndarray:
    """``P x G`` matching cost: class probability, L1 and GIoU terms (cxcywh boxes)."""
    cls_cost = -pred_scores[:, gt_cls]
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    giou = generalized_box_iou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt_boxes))
    return weights.match_cls * cls_cost + weights.l1 * l1 - weights.giou * giou


def _giou_pairs(pred: Tensor, gt: np.ndarray) -> tuple:
    """Differentiable IoU and GIoU for row-aligned cxcywh boxes."""
    cx, cy, w, h = (getitem(pred, (slice(None), i)) for i in range(4))
    px1, py1 = cx - w * 0.5, cy - h * 0.5
    px2, py2 = cx + w * 0.5, cy + h * 0.5
    g = cxcywh_to_xyxy(gt).astype(pred.dtype)
    gx1, gy1, gx2, gy2 = (Tensor(g[:, i]) for i in range(4))
    iw = maximum(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    ih = maximum(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = w * h + Tensor((g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])) - inter
    overlap = inter / union
    enclose = (maximum(px2, gx2) - minimum(px1, gx1)) * (maximum(py2, gy2) - minimum(py1, gy1))
    return overlap, overlap - (enclose - union) / enclose


def detection_loss(pred_boxes, pred_logits, gt_boxes, gt_cls, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """IoU-aware set loss for one image.

    ``pred_boxes`` (``Q x 4``, normalised cxcywh) and ``pred_logits``
    (``Q x C``) are tensors; ground truth is ``G x 4`` boxes and ``G`` class
    indices.  After Hungarian matching, the box term is
    ``l1 * L1 + giou * (1 - GIoU)`` summed over matched pairs, and the class
    term is sigmoid cross-entropy against targets that equal the (detached)
    IoU of each matched prediction for its ground-truth class and 0 elsewhere.
    Both terms are divided by ``max(G, 1)``.
    """
    pred_boxes, pred_logits = as_tensor(pred_boxes), as_tensor(pred_logits)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    gt_cls = np.asarray(gt_cls, dtype=int).reshape(-1)
    if np.any(gt_boxes[:, 2:] <= 0):
        raise BoxError("ground-truth boxes need positive width and height")
    n_gt = len(gt_cls)
    norm = 1.0 / max(n_gt, 1)
    targets = np.zeros(pred_logits.shape, dtype=pred_logits.dtype)
    matches = []
    zero = Tensor(np.zeros((), dtype=pred_boxes.dtype))
    bbox = zero
    if n_gt:
        scores = 1.0 / (1.0 + np.exp(-pred_logits.data.astype(float)))
        cost = match_cost(pred_boxes.data.astype(float), scores, gt_boxes, gt_cls, weights)
        matches = hungarian_match(cost)
        rows = np.array([r for r, _ in matches])
        cols = np.array([c for _, c in matches])
        matched = getitem(pred_boxes, rows)
        gt_m = gt_boxes[cols]
        overlap, giou = _giou_pairs(matched, gt_m)
        l1 = absolute(matched - Tensor(gt_m.astype(pred_boxes.dtype))).sum()
        bbox = (l1 * weights.l1 + (1.0 - giou).sum() * weights.giou) * norm
        targets[rows, gt_cls[cols]] = overlap.data
    z = pred_logits
    bce = softplus(z) - z * Tensor(targets)
    cls = bce.sum() * (weights.cls * norm)
    return LossBreakdown(bbox + cls, bbox, cls, matches, targets, bce.data.copy())


def iou_query_select(scores, k: int) -> np.ndarray:
    """Indices of the top-``k`` tokens by max-over-classes score.

    Ties go to the lower token index; the result is ordered by descending score.
    """
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    if scores.ndim == 1:
        scores = scores[:, None]
    n = scores.shape[0]
    if k > n:
        raise ConfigError(f"cannot select {k} queries from {n} tokens")
    best = scores.max(axis=1)
    order = np.argsort(-best, kind="stable")
    return order[:k]


class DetectionHead(Module):
    """Three-layer MLP per query: 4 box values and one logit per class.

    Boxes are ``sigmoid(out[:4] + anchor)`` where ``anchor`` holds optional
    reference-point logits (zero means no prior); scores are sigmoids of the
    class logits.
    """

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, prior_prob: float | None = None):
        b = 1.0 / np.sqrt(dim)
        self.w1 = Parameter(rng.uniform(-b, b, size=(dim, dim)))
        self.b1 = Parameter(np.zeros(dim))
        self.w2 = Parameter(rng.uniform(-b, b, size=(dim, dim)))
        self.b2 = Parameter(np.zeros(dim))
        self.w_box = Parameter(rng.uniform(-b, b, size=(dim, 4)) * 0.1)
        self.b_box = Parameter(np.zeros(4))
        self.w_cls = Parameter(rng.uniform(-b, b, size=(dim, num_classes)))
        bias = 0.0 if prior_prob is None else -np.log((1 - prior_prob) / prior_prob)
        self.b_cls = Parameter(np.full(num_classes, bias))
        self.num_classes = num_classes

    def forward(self, feats: Tensor, anchors=None) -> tuple:
        """Return ``(boxes, logits)`` for ``... x D`` query features."""
        x = gelu(feats @ self.w1 + self.b1)
        x = gelu(x @ self.w2 + self.b2)
        box_logits = x @ self.w_box + self.b_box
        if anchors is not None:
            box_logits = box_logits + as_tensor(anchors)
        return sigmoid(box_logits), x @ self.w_cls + self.b_cls

    def head_forward(self, queries: list) -> list:
        """Decode a list of :class:`Query` (with features) into :class:`Detection` objects."""
        if not queries:
            return []
        feats = Tensor(np.stack([q.feature for q in queries]))
        boxes, logits = self.forward(feats)
        scores = sigmoid(logits).data
        return [Detection(boxes.data[i], scores[i]) for i in range(len(queries))]
