"""Backbone plus IoU-aware query selection and detection head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .detect import DetectionHead, LossWeights, cxcywh_to_xyxy, detection_loss, iou_query_select, xyxy_to_cxcywh
from .nn import LayerNorm, Module, channel_linear
from .tensor import ConfigError, Parameter, Tensor, concat, getitem, no_grad, sigmoid

__all__ = ["DetectorConfig", "Detector", "token_anchors"]

LOSS_SCOPES = ("all", "selected")


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 3
    dim: int = 64
    num_queries: int = 30
    feature_stages: tuple = (1, 2, 3)
    prior_prob: float = 0.01
    anchor_size: float = 0.15
    loss_scope: str = "all"
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1:
            raise ConfigError("num_classes and dim must be positive")
        if not self.feature_stages or any(s not in range(4) for s in self.feature_stages):
            raise ConfigError(f"feature_stages must index backbone stages 0-3, got {self.feature_stages}")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}, got {self.loss_scope!r}")
        if self.num_queries < 1 or self.num_queries > self.num_tokens:
            raise ConfigError(f"num_queries={self.num_queries} must lie in [1, {self.num_tokens}] tokens")

    @property
    def num_tokens(self) -> int:
        return sum(int(np.prod(self.backbone.stage_extent(s))) for s in self.feature_stages)


def _logit(p):
    p = np.clip(p, 1e-4, 1 - 1e-4)
    return np.log(p / (1 - p))


def token_anchors(config: DetectorConfig) -> np.ndarray:
    """Reference boxes (``T x 4`` logits of normalised cxcywh), one per token.

    Each token sits at the centre of its grid cell; the reference size doubles
    with each stage starting from ``anchor_size``.
    """
    rows = []
    for level, s in enumerate(config.feature_stages):
        h, w = config.backbone.stage_extent(s)
        cy, cx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        size = config.anchor_size * 2 ** level
        rows.append(np.stack([cx.ravel(), cy.ravel(), np.full(h * w, size), np.full(h * w, size)], axis=1))
    return _logit(np.concatenate(rows))


class Detector(Module):
    """Multi-scale tokens from the backbone feed a shared detection head.

    Tokens are the flattened feature maps of ``feature_stages``, each
    normalised and projected to ``dim`` channels.  Training matches ground
    truth against every token (or against the top ``num_queries`` when
    ``loss_scope == "selected"``); inference keeps the top ``num_queries``.
    """

    def __init__(self, config: DetectorConfig, rng: np.random.Generator | int = 0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.config = config
        self.backbone = Backbone(config.backbone, rng)
        self.norms, self.proj_w, self.proj_b = [], [], []
        for s in config.feature_stages:
            c = config.backbone.channels[s]
            self.norms.append(LayerNorm(c))
            self.proj_w.append(Parameter(rng.uniform(-1, 1, size=(c, config.dim)) / np.sqrt(c)))
            self.proj_b.append(Parameter(np.zeros(config.dim)))
        self.head = DetectionHead(config.dim, config.num_classes, rng, config.prior_prob)
        self.anchors = token_anchors(config)

    def tokens(self, frames, rng=None, temperature: float = 1.0) -> Tensor:
        """``N x T x dim`` token features."""
        feats = self.backbone(frames, rng, temperature)
        parts = []
        for norm, w, b, s in zip(self.norms, self.proj_w, self.proj_b, self.config.feature_stages):
            x = channel_linear(norm(feats[s]), w, b)
            n, d, h, wd = x.shape
            parts.append(x.reshape(n, d, h * wd).transpose(0, 2, 1))
        return concat(parts, axis=1) if len(parts) > 1 else parts[0]

    def forward(self, frames, rng=None, temperature: float = 1.0) -> tuple:
        """``(boxes N x T x 4, logits N x T x C)`` with boxes as normalised cxcywh."""
        tok = self.tokens(frames, rng, temperature)
        anchors = Tensor(self.anchors.astype(tok.dtype))
        return self.head(tok, anchors)

    def _normalise(self, boxes_xyxy) -> np.ndarray:
        h, w = self.config.backbone.resolution
        b = np.asarray(boxes_xyxy, dtype=float).reshape(-1, 4)
        return xyxy_to_cxcywh(b / np.array([w, h, w, h]))

    def loss(self, frames, gt_boxes: list, gt_cls: list, rng=None, temperature: float = 1.0) -> tuple:
        """Mean per-image loss; ground truth boxes are pixel ``x1, y1, x2, y2``.

        Returns ``(total, {"loss": .., "bbox": .., "cls": ..})``.
        """
        boxes, logits = self.forward(frames, rng, temperature)
        n = boxes.shape[0]
        if len(gt_boxes) != n or len(gt_cls) != n:
            raise ConfigError(f"ground truth for {len(gt_boxes)} images, batch has {n}")
        total = bbox = cls = None
        for i in range(n):
            b_i, l_i = getitem(boxes, i), getitem(logits, i)
            if self.config.loss_scope == "selected":
                idx = iou_query_select(sigmoid(l_i).data, self.config.num_queries)
                b_i, l_i = getitem(b_i, idx), getitem(l_i, idx)
            br = detection_loss(b_i, l_i, self._normalise(gt_boxes[i]), gt_cls[i], self.config.loss_weights)
            total = br.total if total is None else total + br.total
            bbox = br.bbox.item() if bbox is None else bbox + br.bbox.item()
            cls = br.cls.item() if cls is None else cls + br.cls.item()
        total = total * (1.0 / n)
        return total, {"loss": total.item(), "bbox": bbox / n, "cls": cls / n}

    def predict(self, frames, batch_size: int = 32) -> list:
        """Eval-mode detections per image: ``(boxes xyxy pixels, scores, labels)``.

        The top ``num_queries`` tokens are kept, then the best ``num_queries``
        (token, class) pairs among them become detections.
        """
        was_training = self.training
        self.eval()
        frames = np.asarray(frames)
        h, w = self.config.backbone.resolution
        scale = np.array([w, h, w, h])
        k = self.config.num_queries
        out = []
        try:
            with no_grad():
                for start in range(0, len(frames), batch_size):
                    boxes, logits = self.forward(frames[start:start + batch_size])
                    scores = 1.0 / (1.0 + np.exp(-logits.data.astype(float)))
                    for b, s in zip(boxes.data.astype(float), scores):
                        idx = iou_query_select(s, k)
                        flat = s[idx].ravel()
                        top = np.argsort(-flat, kind="stable")[:k]
                        q, c = np.divmod(top, s.shape[1])
                        out.append((cxcywh_to_xyxy(b[idx[q]]) * scale, flat[top], c))
        finally:
            self.train(was_training)
        return out
