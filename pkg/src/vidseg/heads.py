"""Prediction heads, bipartite instance matching, and training losses.

Per-query outputs are a class distribution (K real classes plus a trailing
no-object class), per-frame boxes in normalized (cx, cy, w, h), and per-frame
soft mask logits at the finest pyramid resolution. Ground-truth instances are
matched to queries by a minimum-cost assignment before any loss is computed.

The foreground/background branch scores (frames, encoder features, mask)
stacks with a small patch discriminator; its two losses follow the usual
non-saturating GAN form plus an L1 term between the real/fake score maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import ScaleFeatures
from .model import to_grid
from .nn import Conv2d, Linear, Module
from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    bce_with_logits,
    bilinear_resize,
    clip,
    concat,
    div,
    exp,
    expand,
    gelu,
    leaky_relu,
    log,
    matmul,
    maximum,
    reshape,
    sigmoid,
    take,
    tmean,
    tsum,
)


@dataclass
class PredictionSet:
    """Per-query outputs: class_logits [n, K+1], boxes [T, n, 4] in [0, 1],
    mask_logits [T, n, Hm, Wm]."""

    class_logits: Tensor
    boxes: Tensor
    mask_logits: Tensor

    @property
    def num_queries(self):
        return self.class_logits.shape[0]


class PredictionHeads(Module):
    def __init__(self, rng, dim, num_classes, mask_dim=None, dtype=np.float32):
        mask_dim = mask_dim or max(8, dim // 4)
        self.class_head = Linear(rng, dim, num_classes + 1, dtype=dtype)
        self.box1 = Linear(rng, dim, dim, dtype=dtype)
        self.box2 = Linear(rng, dim, dim, dtype=dtype)
        self.box3 = Linear(rng, dim, 4, dtype=dtype)
        self.mask_conv1 = Conv2d(rng, dim, dim, 3, pad=1, dtype=dtype)
        self.mask_conv2 = Conv2d(rng, dim, mask_dim, 3, pad=1, dtype=dtype)
        self.controller = Linear(rng, dim, mask_dim + 1, dtype=dtype)
        self.mask_dim = mask_dim

    def __call__(self, instance_feats, box_feats, finest):
        """instance_feats [n, C], box_feats [T, n, C], finest ScaleFeatures."""
        class_logits = self.class_head(instance_feats)
        boxes = sigmoid(self.box3(gelu(self.box2(gelu(self.box1(box_feats))))))

        grid = to_grid(finest.data, finest.height, finest.width)  # [T, C, H, W]
        feats = self.mask_conv2(gelu(self.mask_conv1(grid)))  # [T, Cm, H, W]
        t, cm, h, w = feats.shape
        n = instance_feats.shape[0]

        ctrl = self.controller(instance_feats)  # [n, Cm+1]
        weights = take(ctrl, range(cm), axis=1)  # [n, Cm]
        bias = take(ctrl, [cm], axis=1)  # [n, 1]
        flat = reshape(feats, (t, cm, h * w))
        logits = matmul(expand(reshape(weights, (1, n, cm)), (t, n, cm)), flat)
        logits = logits + expand(reshape(bias, (1, n, 1)), (t, n, h * w))
        return PredictionSet(class_logits, boxes, reshape(logits, (t, n, h, w)))


# ---------------------------------------------------------------------------
# Targets


@dataclass
class Targets:
    """Ground truth of one clip, prepared for matching and losses."""

    class_ids: np.ndarray  # [G]
    boxes: np.ndarray  # [T, G, 4] normalized cxcywh, zeros when invisible
    visibility: np.ndarray  # [T, G] bool
    masks: np.ndarray  # [T, G, Hm, Wm] float, area-averaged to mask res

    @property
    def count(self):
        return len(self.class_ids)


def downsample_mask(mask, out_hw):
    """Area-average a [.., H, W] binary mask onto an integer-factor grid."""
    oh, ow = out_hw
    h, w = mask.shape[-2:]
    if h % oh or w % ow:
        raise ShapeError(f"mask {h}x{w} not an integer multiple of {oh}x{ow}")
    fh, fw = h // oh, w // ow
    view = mask.reshape(*mask.shape[:-2], oh, fh, ow, fw)
    return view.mean(axis=(-3, -1), dtype=np.float32)


def build_targets(sample, mask_hw):
    """Normalize a VideoSample's annotations for matching and losses."""
    t = sample.frames.shape[0]
    h0, w0 = sample.frames.shape[-2:]
    g = len(sample.instances)
    class_ids = np.array([inst.class_id for inst in sample.instances], dtype=np.int64)
    boxes = np.zeros((t, g, 4), dtype=np.float32)
    vis = np.zeros((t, g), dtype=bool)
    masks = np.zeros((t, g) + tuple(mask_hw), dtype=np.float32)
    scale = np.array([w0, h0, w0, h0], dtype=np.float32)
    for j, inst in enumerate(sample.instances):
        vis[:, j] = inst.visibility
        boxes[:, j] = inst.boxes / scale
        boxes[~inst.visibility, j] = 0.0
        masks[:, j] = downsample_mask(inst.masks.astype(np.float32), mask_hw)
    return Targets(class_ids, boxes, vis, masks)


# ---------------------------------------------------------------------------
# Matching


def solve_assignment(cost):
    """Minimum-cost row->column assignment (rows <= columns), O(R^2 C).

    Potentials-based shortest augmenting path; exact for any finite costs.
    """
    rows, cols = cost.shape
    if rows > cols:
        raise ValueError(f"assignment needs rows <= cols, got {cost.shape}")
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    match = np.zeros(cols + 1, dtype=np.int64)  # col -> 1-based row, 0 free
    way = np.zeros(cols + 1, dtype=np.int64)
    for i in range(1, rows + 1):
        match[0] = i
        j0 = 0
        minv = np.full(cols + 1, np.inf)
        used = np.zeros(cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, cols + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(cols + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assign = np.full(rows, -1, dtype=np.int64)
    for j in range(1, cols + 1):
        if match[j]:
            assign[match[j] - 1] = j - 1
    return assign


def assignment_cost(cost, assign):
    """Total cost of an assignment, summed in row order."""
    total = 0.0
    for i, j in enumerate(assign):
        total += float(cost[i, j])
    return total


@dataclass(frozen=True)
class MatchWeights:
    class_prob: float = 2.0
    box_l1: float = 5.0
    dice: float = 2.0


def dice_score(a, b):
    """Video dice of two mask sequences; both-empty counts as 1."""
    num = 2.0 * float((a * b).sum())
    den = float(a.sum()) + float(b.sum())
    if den == 0.0:
        return 1.0
    return num / den


def match_cost_matrix(pred, targets, weights=MatchWeights()):
    """[G, n] cost combining class probability, box L1 and video dice."""
    probs = np.asarray(_np_softmax(pred.class_logits.data, axis=-1))
    boxes = pred.boxes.data  # [T, n, 4]
    mask_probs = _np_sigmoid(pred.mask_logits.data)  # [T, n, Hm, Wm]
    g = targets.count
    n = pred.num_queries
    cost = np.zeros((g, n))
    for i in range(g):
        cost_cls = 1.0 - probs[:, targets.class_ids[i]]
        vis = targets.visibility[:, i]
        if vis.any():
            diff = np.abs(boxes[vis] - targets.boxes[vis, i][:, None, :])
            cost_box = diff.sum(axis=-1).mean(axis=0)
        else:
            cost_box = np.zeros(n)
        gt_mask = targets.masks[:, i]  # [T, Hm, Wm]
        num = 2.0 * (mask_probs * gt_mask[:, None]).sum(axis=(0, 2, 3))
        den = mask_probs.sum(axis=(0, 2, 3)) + gt_mask.sum()
        dice = num / np.maximum(den, 1e-12)
        cost[i] = (
            weights.class_prob * cost_cls
            + weights.box_l1 * cost_box
            + weights.dice * (1.0 - dice)
        )
    return cost


def hungarian_match(pred, targets, weights=MatchWeights()):
    """Assign each ground-truth instance to a distinct query.

    Returns (assignment [G] of query indices, total cost).
    """
    if targets.count > pred.num_queries:
        raise ValueError(
            f"cannot match {targets.count} instances to {pred.num_queries} queries"
        )
    if targets.count == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    cost = match_cost_matrix(pred, targets, weights)
    assign = solve_assignment(cost)
    return assign, assignment_cost(cost, assign)


def _np_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _np_sigmoid(x):
    p = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, p, 1.0 - p)


# ---------------------------------------------------------------------------
# Supervised losses


@dataclass(frozen=True)
class LossWeights:
    classification: float = 2.0
    box_l1: float = 5.0
    dice: float = 2.0
    bce: float = 2.0
    no_object: float = 0.1  # down-weight of the background class


def log_softmax(x, axis=-1):
    shift = Tensor(x.data.max(axis=axis, keepdims=True))  # constant shift
    z = x + expand(shift, x.shape) * -1.0
    total = tsum(exp(z), axis=axis, keepdims=True)
    return z + expand(log(total), x.shape) * -1.0


def supervised_loss(pred, targets, assignment, weights=LossWeights()):
    """Weighted classification + box + mask loss; returns (total, components)."""
    n = pred.num_queries
    k = pred.class_logits.shape[1] - 1
    t = pred.boxes.shape[0]

    # classification over all queries, no-object for the unmatched
    labels = np.full(n, k, dtype=np.int64)
    for i, q in enumerate(assignment):
        labels[q] = targets.class_ids[i]
    class_w = np.where(labels == k, weights.no_object, 1.0).astype(np.float32)
    logp = log_softmax(pred.class_logits, axis=-1)
    onehot = np.zeros((n, k + 1), dtype=np.float32)
    onehot[np.arange(n), labels] = class_w
    ce = tsum(logp * Tensor(onehot)) * (-1.0 / float(class_w.sum()))

    parts = {"class": ce}
    if targets.count:
        qidx = np.asarray(assignment, dtype=np.int64)
        boxes = take(pred.boxes, qidx, axis=1)  # [T, G, 4]
        vis = targets.visibility.astype(np.float32)[..., None]  # [T, G, 1]
        nvis = max(float(vis.sum()), 1.0)
        diff = absolute(boxes + Tensor(-targets.boxes)) * Tensor(
            np.broadcast_to(vis, boxes.shape).copy()
        )
        parts["box"] = tsum(diff) * (1.0 / (4.0 * nvis))

        mlogits = take(pred.mask_logits, qidx, axis=1)  # [T, G, Hm, Wm]
        parts["bce"] = bce_with_logits(mlogits, targets.masks)
        probs = sigmoid(mlogits)
        gt = Tensor(targets.masks)
        num = tsum(probs * gt, axis=(0, 2, 3)) * 2.0 + 1.0
        den = tsum(probs, axis=(0, 2, 3)) + Tensor(
            targets.masks.sum(axis=(0, 2, 3)) + 1.0
        )
        parts["dice"] = tmean(div(num, den) * -1.0 + 1.0)
    else:
        zero = np.zeros((), dtype=pred.class_logits.dtype)
        parts["box"] = Tensor(zero)
        parts["bce"] = Tensor(zero)
        parts["dice"] = Tensor(zero)

    total = (
        parts["class"] * weights.classification
        + parts["box"] * weights.box_l1
        + parts["dice"] * weights.dice
        + parts["bce"] * weights.bce
    )
    return total, {name: value.item() for name, value in parts.items()}


# ---------------------------------------------------------------------------
# Foreground/background discrimination


class Discriminator(Module):
    """4-layer strided patch discriminator over (frames, features, mask)."""

    def __init__(self, rng, feat_dim, width=32, dtype=np.float32):
        c_in = 3 + feat_dim + 1
        self.conv1 = Conv2d(rng, c_in, width, 3, stride=2, pad=1, dtype=dtype)
        self.conv2 = Conv2d(rng, width, width * 2, 3, stride=2, pad=1, dtype=dtype)
        self.conv3 = Conv2d(rng, width * 2, width * 2, 3, stride=1, pad=1, dtype=dtype)
        self.conv4 = Conv2d(rng, width * 2, 1, 3, stride=1, pad=1, dtype=dtype)
        self.slope = 0.2

    def __call__(self, x):
        """x [T, 3+C+1, Hm, Wm] -> patch scores in (0, 1)."""
        h = leaky_relu(self.conv1(x), self.slope)
        h = leaky_relu(self.conv2(h), self.slope)
        h = leaky_relu(self.conv3(h), self.slope)
        return sigmoid(self.conv4(h))


def build_disc_input(frames, finest, mask):
    """CONCAT(frames, features, mask) at mask resolution.

    frames: constant [T, 3, H0, W0] array; finest: ScaleFeatures whose grid
    matches the mask resolution; mask: Tensor [T, 1, Hm, Wm].
    """
    t, _, hm, wm = mask.shape
    if (finest.height, finest.width) != (hm, wm):
        raise ShapeError(
            f"feature grid {finest.height}x{finest.width} != mask {hm}x{wm}"
        )
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    small = bilinear_resize(arr, (hm, wm)).astype(np.float32)
    feat = to_grid(finest.data, finest.height, finest.width)  # [T, C, Hm, Wm]
    return concat([Tensor(small), feat, mask], axis=1)


def foreground_union(mask_probs):
    """Merge [T, G, Hm, Wm] instance masks into one [T, 1, Hm, Wm] map (max)."""
    t, g, h, w = mask_probs.shape
    union = take(mask_probs, [0], axis=1)
    for j in range(1, g):
        union = maximum(union, take(mask_probs, [j], axis=1))
    return union


_EPS = 1e-6


def adversarial_losses(f_real, f_fake, disc, lambda_feat=10.0):
    """(discriminator loss, generator loss) over real/fake stacks.

    disc loss = -E[log D(real)] - E[log(1 - D(fake))]
    gen loss  = -E[log D(fake)] + lambda_feat * E[|D(real) - D(fake)|]
    Scores are clamped away from {0, 1} before the logs.
    """
    d_real = disc(f_real)
    d_fake = disc(f_fake)
    loss_d = tmean(log(clip(d_real, _EPS, 1.0 - _EPS))) * -1.0 + tmean(
        log(clip(d_fake * -1.0 + 1.0, _EPS, 1.0 - _EPS))
    ) * -1.0
    loss_g = tmean(log(clip(d_fake, _EPS, 1.0 - _EPS))) * -1.0
    if lambda_feat:
        loss_g = loss_g + tmean(absolute(d_real + d_fake * -1.0)) * lambda_feat
    return loss_d, loss_g
