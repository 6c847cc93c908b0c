"""Video-level mask AP/AR and temporal-consistency diagnostics.

A predicted instance is a scored, classified sequence of binary masks; IoU
between sequences accumulates intersections and unions over all frames.
AP follows the image-segmentation protocol lifted to videos: greedy matching
per class in descending score order at each IoU threshold, 101-point
interpolated precision, averaged over classes and thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


def video_iou(pred_masks, gt_masks):
    """IoU of two mask sequences, accumulated over all frames.

    Empty against empty is defined as 1.
    """
    p = np.asarray(pred_masks).astype(bool)
    g = np.asarray(gt_masks).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"video_iou: shapes {p.shape} and {g.shape} differ")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class PredictedInstance:
    class_id: int
    score: float
    masks: np.ndarray  # [T, H, W] bool


@dataclass
class GroundTruthInstance:
    class_id: int
    masks: np.ndarray


@dataclass
class VideoEntry:
    predictions: list
    truths: list
    attributes: tuple = ()


@dataclass
class EvalResult:
    """All metrics in percent."""

    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    per_attribute: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # threshold -> (tp, fp, fn)

    def to_json(self):
        return json.dumps(
            {
                "AP": self.ap,
                "AP50": self.ap50,
                "AP75": self.ap75,
                "AR1": self.ar1,
                "AR10": self.ar10,
                "per_attribute": self.per_attribute,
                "counts": {f"{k:.2f}": list(v) for k, v in self.counts.items()},
            },
            indent=1,
            sort_keys=True,
        )

    def to_table(self):
        rows = [
            ("AP", self.ap), ("AP50", self.ap50), ("AP75", self.ap75),
            ("AR1", self.ar1), ("AR10", self.ar10),
        ]
        rows += [(f"AP[{k}]", v) for k, v in sorted(self.per_attribute.items())]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value:6.2f}" for name, value in rows)


def _iou_tables(entries):
    """Per video: IoU matrix [n_pred, n_gt] plus class vectors."""
    tables = []
    for entry in entries:
        n_p, n_g = len(entry.predictions), len(entry.truths)
        iou = np.zeros((n_p, n_g))
        for i, p in enumerate(entry.predictions):
            for j, g in enumerate(entry.truths):
                iou[i, j] = video_iou(p.masks, g.masks)
        tables.append(iou)
    return tables


def _class_ids(entries):
    ids = set()
    for entry in entries:
        ids.update(g.class_id for g in entry.truths)
    return sorted(ids)


def _match_class(entries, tables, class_id, threshold, keep=None):
    """Greedy matching for one class at one threshold.

    Returns (scores, tp_flags, n_gt). `keep` optionally maps entry index to
    a set of prediction indices allowed in (for AR's per-video caps).
    """
    records = []  # (score, entry_idx, pred_idx)
    n_gt = 0
    for e_idx, entry in enumerate(entries):
        n_gt += sum(1 for g in entry.truths if g.class_id == class_id)
        for p_idx, p in enumerate(entry.predictions):
            if p.class_id != class_id:
                continue
            if keep is not None and p_idx not in keep[e_idx]:
                continue
            records.append((p.score, e_idx, p_idx))
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    matched = [set() for _ in entries]
    tp = np.zeros(len(records), dtype=bool)
    for r_idx, (_, e_idx, p_idx) in enumerate(records):
        entry = entries[e_idx]
        best_j, best_iou = -1, threshold
        for j, g in enumerate(entry.truths):
            if g.class_id != class_id or j in matched[e_idx]:
                continue
            iou = tables[e_idx][p_idx, j]
            if iou >= best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[e_idx].add(best_j)
            tp[r_idx] = True
    scores = np.array([r[0] for r in records])
    return scores, tp, n_gt


def _ap_from_flags(tp, n_gt):
    """101-point interpolated average precision from ordered TP flags."""
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # envelope: best precision at any recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    out = np.zeros(RECALL_GRID.size)
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    valid = idx < len(precision)
    out[valid] = precision[idx[valid]]
    return float(out.mean())


def _top_predictions(entries, limit):
    keep = []
    for entry in entries:
        order = sorted(
            range(len(entry.predictions)),
            key=lambda i: (-entry.predictions[i].score, i),
        )
        keep.append(set(order[:limit]))
    return keep


def compute_ap(entries, thresholds=IOU_THRESHOLDS):
    """YouTube-VIS style AP/AR over a list of VideoEntry."""
    tables = _iou_tables(entries)
    classes = _class_ids(entries)
    ap_per_threshold = {}
    counts = {}
    for thr in thresholds:
        vals = []
        tp_total = fp_total = fn_total = 0
        for cid in classes:
            scores, tp, n_gt = _match_class(entries, tables, cid, thr)
            ap = _ap_from_flags(tp, n_gt)
            if ap is not None:
                vals.append(ap)
            tp_total += int(tp.sum())
            fp_total += int((~tp).sum())
            fn_total += n_gt - int(tp.sum())
        ap_per_threshold[thr] = float(np.mean(vals)) if vals else 0.0
        counts[float(thr)] = (tp_total, fp_total, fn_total)

    def recall_at(limit):
        keep = _top_predictions(entries, limit)
        per_class = []
        for cid in classes:
            recalls = []
            for thr in thresholds:
                _, tp, n_gt = _match_class(entries, tables, cid, thr, keep=keep)
                if n_gt:
                    recalls.append(tp.sum() / n_gt)
            if recalls:
                per_class.append(np.mean(recalls))
        return 100.0 * float(np.mean(per_class)) if per_class else 0.0

    def nearest(target):
        return min(thresholds, key=lambda t: abs(t - target))

    ap = 100.0 * float(np.mean([ap_per_threshold[t] for t in thresholds]))
    result = EvalResult(
        ap=ap,
        ap50=100.0 * ap_per_threshold[nearest(0.50)],
        ap75=100.0 * ap_per_threshold[nearest(0.75)],
        ar1=recall_at(1),
        ar10=recall_at(10),
        counts=counts,
    )
    attrs = sorted({a for e in entries for a in e.attributes})
    for attr in attrs:
        subset = [e for e in entries if attr in e.attributes]
        result.per_attribute[attr] = compute_ap_plain(subset, thresholds)
    return result


def compute_ap_plain(entries, thresholds=IOU_THRESHOLDS):
    """Mean AP only (percent) for a subset of videos."""
    tables = _iou_tables(entries)
    classes = _class_ids(entries)
    vals = []
    for thr in thresholds:
        per_class = []
        for cid in classes:
            _, tp, n_gt = _match_class(entries, tables, cid, thr)
            ap = _ap_from_flags(tp, n_gt)
            if ap is not None:
                per_class.append(ap)
        vals.append(np.mean(per_class) if per_class else 0.0)
    return 100.0 * float(np.mean(vals))


def temporal_consistency(pred_masks, gt_boxes=None):
    """Mean IoU between consecutive frames of one instance's masks.

    With `gt_boxes` [T, 4] (cxcywh pixels) the earlier frame is shifted by
    the rounded ground-truth center displacement before comparison, so that
    genuine motion is not billed as inconsistency.
    """
    masks = np.asarray(pred_masks).astype(bool)
    t = masks.shape[0]
    if t < 2:
        raise ValueError("temporal consistency needs at least 2 frames")
    vals = []
    for i in range(t - 1):
        cur = masks[i]
        if gt_boxes is not None:
            dx = int(np.rint(gt_boxes[i + 1][0] - gt_boxes[i][0]))
            dy = int(np.rint(gt_boxes[i + 1][1] - gt_boxes[i][1]))
            cur = _shift(cur, dy, dx)
        union = np.logical_or(cur, masks[i + 1]).sum()
        vals.append(
            1.0 if union == 0 else np.logical_and(cur, masks[i + 1]).sum() / union
        )
    return float(np.mean(vals))


def _shift(mask, dy, dx):
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[ys_src, xs_src]
    return out
