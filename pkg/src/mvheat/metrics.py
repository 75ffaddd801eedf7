"""COCO-style mean average precision."""
from __future__ import annotations

import numpy as np

from .detect import box_iou

__all__ = ["COCO_THRESHOLDS", "average_precision", "evaluate_map", "empty_metrics"]

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def average_precision(tp: np.ndarray, scores: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from per-detection TP flags in ranked order.

    Precision/recall are read only at the end of each run of equal scores, so
    the ordering of tied detections does not change the curve.
    """
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    ends = np.flatnonzero(np.append(np.diff(scores) != 0, True))
    recall = ctp[ends] / n_gt
    precision = ctp[ends] / (ctp[ends] + cfp[ends])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean())


def _match_class(dets, gts, cls, threshold):
    """Greedy per-image matching of one class at one IoU threshold."""
    records = []
    n_gt = 0
    for img, ((dboxes, dscores, dlabels), (gboxes, glabels)) in enumerate(zip(dets, gts)):
        gsel = np.flatnonzero(np.asarray(glabels) == cls)
        n_gt += len(gsel)
        dsel = np.flatnonzero(np.asarray(dlabels) == cls)
        for j in dsel:
            records.append((-float(dscores[j]), img, int(j)))
    records.sort()
    tp = np.zeros(len(records))
    taken = {}
    overlaps = {}
    for r, (neg_score, img, j) in enumerate(records):
        gboxes, glabels = gts[img]
        gsel = np.flatnonzero(np.asarray(glabels) == cls)
        if not len(gsel):
            continue
        if img not in overlaps:
            overlaps[img] = {}
        if j not in overlaps[img]:
            overlaps[img][j] = box_iou(np.asarray(dets[img][0])[j:j + 1], np.asarray(gboxes)[gsel])[0]
        ious = overlaps[img][j].copy()
        used = taken.setdefault(img, np.zeros(len(gsel), dtype=bool))
        ious[used] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            used[best] = True
            tp[r] = 1.0
    scores = np.array([-s for s, _, _ in records])
    return tp, scores, n_gt


def empty_metrics(num_classes: int = 0) -> dict:
    return {"map_50_95": 0.0, "map_50": 0.0, "map_75": 0.0, "precision": 0.0, "recall": 0.0,
            "per_class": [None] * num_classes}


def evaluate_map(dets: list, gts: list, iou_thresholds=COCO_THRESHOLDS, num_classes: int | None = None,
                 score_threshold: float = 0.5) -> dict:
    """Mean AP over classes and IoU thresholds.

    ``dets[i]`` is ``(boxes, scores, labels)`` and ``gts[i]`` is
    ``(boxes, labels)`` for image ``i``; boxes are ``x1, y1, x2, y2``.
    Classes without ground truth are left out of the averages.  Precision
    and recall are pooled over classes at IoU 0.5 for detections scoring at
    least ``score_threshold``.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection sets for {len(gts)} images")
    dets = [tuple(np.asarray(a) for a in d) for d in dets]
    gts = [(np.asarray(b, dtype=float).reshape(-1, 4), np.asarray(l, dtype=int)) for b, l in gts]
    dets = [(b.reshape(-1, 4).astype(float), s.astype(float), l.astype(int)) for b, s, l in dets]
    if num_classes is None:
        labels = [l for _, l in gts] + [l for _, _, l in dets]
        num_classes = int(max((l.max() for l in labels if l.size), default=-1)) + 1
    thresholds = tuple(float(t) for t in iou_thresholds)
    table = np.full((len(thresholds), num_classes), np.nan)
    extra = {}
    for c in range(num_classes):
        for ti, thr in enumerate(thresholds):
            tp, scores, n_gt = _match_class(dets, gts, c, thr)
            table[ti, c] = average_precision(tp, scores, n_gt)
        for thr in (0.5, 0.75):
            if thr not in thresholds:
                tp, scores, n_gt = _match_class(dets, gts, c, thr)
                extra.setdefault(thr, []).append(average_precision(tp, scores, n_gt))

    def _at(thr):
        if thr in thresholds:
            row = table[thresholds.index(thr)]
        else:
            row = np.array(extra.get(thr, []))
        return float(np.nanmean(row)) if np.any(~np.isnan(row)) else 0.0

    valid = ~np.all(np.isnan(table), axis=0)
    map_all = float(np.nanmean(table[:, valid])) if valid.any() else 0.0

    tp_total = fp_total = gt_total = 0
    for c in range(num_classes):
        filtered = [(b[s >= score_threshold], s[s >= score_threshold], l[s >= score_threshold]) for b, s, l in dets]
        tp, _, n_gt = _match_class(filtered, gts, c, 0.5)
        tp_total += tp.sum()
        fp_total += len(tp) - tp.sum()
        gt_total += n_gt
    precision = tp_total / (tp_total + fp_total) if tp_total + fp_total else 0.0
    recall = tp_total / gt_total if gt_total else 0.0
    per_class = [None if not valid[c] else float(np.nanmean(table[:, c])) for c in range(num_classes)]
    return {"map_50_95": map_all, "map_50": _at(0.5), "map_75": _at(0.75),
            "precision": float(precision), "recall": float(recall), "per_class": per_class}
