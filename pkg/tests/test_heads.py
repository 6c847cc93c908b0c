import itertools

import numpy as np
import pytest

from vidseg.attention import ScaleFeatures
from vidseg.heads import (
    Discriminator,
    LossWeights,
    MatchWeights,
    PredictionHeads,
    PredictionSet,
    Targets,
    adversarial_losses,
    assignment_cost,
    build_disc_input,
    build_targets,
    dice_score,
    downsample_mask,
    foreground_union,
    hungarian_match,
    log_softmax,
    match_cost_matrix,
    solve_assignment,
    supervised_loss,
)
from vidseg.tensor import Tape, Tensor, sigmoid, tsum


def brute_force_assignment(cost):
    rows, cols = cost.shape
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(cols), rows):
        total = 0.0
        for i, j in enumerate(perm):
            total += float(cost[i, j])
        if total < best:
            best, best_perm = total, perm
    return best, best_perm


# --- assignment solver ------------------------------------------------------


def test_single_pair_assignment():
    assign = solve_assignment(np.array([[3.5]]))
    assert assign.tolist() == [0]


def test_two_by_two_identity():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    assign = solve_assignment(cost)
    assert assign.tolist() == [0, 1]
    assert assignment_cost(cost, assign) == 0.0


def test_assignment_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(20):
        rows = int(rng.integers(1, 6))
        cols = int(rng.integers(rows, 9))
        cost = rng.random((rows, cols))
        assign = solve_assignment(cost)
        assert len(set(assign.tolist())) == rows  # one-to-one
        best, _ = brute_force_assignment(cost)
        assert assignment_cost(cost, assign) == best


def test_assignment_rejects_more_rows_than_cols():
    with pytest.raises(ValueError):
        solve_assignment(np.zeros((3, 2)))


# --- matching on predictions --------------------------------------------------


def make_pred(rng, n=4, t=2, k=3, hm=4, wm=4):
    return PredictionSet(
        class_logits=Tensor(rng.normal(size=(n, k + 1)).astype(np.float32)),
        boxes=Tensor(rng.random((t, n, 4)).astype(np.float32)),
        mask_logits=Tensor(rng.normal(size=(t, n, hm, wm)).astype(np.float32)),
    )


def make_targets(rng, g=2, t=2, k=3, hm=4, wm=4):
    masks = (rng.random((t, g, hm, wm)) > 0.6).astype(np.float32)
    return Targets(
        class_ids=rng.integers(0, k, size=g).astype(np.int64),
        boxes=rng.random((t, g, 4)).astype(np.float32),
        visibility=np.ones((t, g), dtype=bool),
        masks=masks,
    )


def test_single_gt_single_query():
    rng = np.random.default_rng(1)
    pred = make_pred(rng, n=1)
    targets = make_targets(rng, g=1)
    assign, cost = hungarian_match(pred, targets)
    assert assign.tolist() == [0]
    assert cost == match_cost_matrix(pred, targets)[0, 0]


def test_match_more_gt_than_queries_is_contract_error():
    rng = np.random.default_rng(2)
    pred = make_pred(rng, n=1)
    targets = make_targets(rng, g=2)
    with pytest.raises(ValueError, match="match"):
        hungarian_match(pred, targets)


def test_match_total_equals_brute_force_over_trials():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = int(rng.integers(1, 4))
        n = int(rng.integers(g, 7))
        pred = make_pred(rng, n=n)
        targets = make_targets(rng, g=g)
        assign, total = hungarian_match(pred, targets)
        cost = match_cost_matrix(pred, targets)
        best, _ = brute_force_assignment(cost)
        assert total == best


def test_cost_components_weighting():
    rng = np.random.default_rng(4)
    pred = make_pred(rng, n=2)
    targets = make_targets(rng, g=1)
    zero = match_cost_matrix(pred, targets, MatchWeights(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(zero, 0.0)
    only_cls = match_cost_matrix(pred, targets, MatchWeights(1.0, 0.0, 0.0))
    assert np.all(only_cls >= 0.0) and np.all(only_cls <= 1.0)


# --- dice ---------------------------------------------------------------------


def test_dice_self_and_complement():
    rng = np.random.default_rng(5)
    m = (rng.random((2, 4, 4)) > 0.5).astype(np.float64)
    assert dice_score(m, m) == 1.0
    assert dice_score(m, 1.0 - m) == 0.0
    assert dice_score(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


# --- supervised loss -------------------------------------------------------------


def test_perfect_one_hot_dice_loss_is_zero():
    # one gt instance; mask logits hugely confident and exactly right
    t, hm, wm = 2, 4, 4
    gt_mask = np.zeros((t, 1, hm, wm), dtype=np.float32)
    gt_mask[:, 0, 1:3, 1:3] = 1.0
    logits = np.where(gt_mask > 0, 40.0, -40.0).astype(np.float32)
    pred = PredictionSet(
        class_logits=Tensor(np.array([[40.0, 0.0, 0.0, 0.0]], dtype=np.float32)),
        boxes=Tensor(np.full((t, 1, 4), 0.5, dtype=np.float32)),
        mask_logits=Tensor(logits),
    )
    targets = Targets(
        class_ids=np.array([0]),
        boxes=np.full((t, 1, 4), 0.5, dtype=np.float32),
        visibility=np.ones((t, 1), dtype=bool),
        masks=gt_mask,
    )
    total, parts = supervised_loss(pred, targets, np.array([0]))
    assert parts["dice"] == pytest.approx(0.0, abs=1e-6)
    assert parts["box"] == pytest.approx(0.0, abs=1e-6)
    assert parts["class"] == pytest.approx(0.0, abs=1e-6)


def test_uniform_masks_bce_is_ln2():
    rng = np.random.default_rng(6)
    t, hm, wm = 2, 4, 4
    pred = PredictionSet(
        class_logits=Tensor(rng.normal(size=(2, 4)).astype(np.float32)),
        boxes=Tensor(rng.random((t, 2, 4)).astype(np.float32)),
        mask_logits=Tensor(np.zeros((t, 2, hm, wm), dtype=np.float32)),
    )
    targets = make_targets(rng, g=1, t=t, hm=hm, wm=wm)
    _, parts = supervised_loss(pred, targets, np.array([0]))
    assert parts["bce"] == pytest.approx(np.log(2.0), rel=1e-5)


def straight_line_loss(pred, targets, assign, w):
    """Independent reimplementation with plain numpy."""
    logits = pred.class_logits.data
    n, kp1 = logits.shape
    k = kp1 - 1
    labels = np.full(n, k)
    for i, q in enumerate(assign):
        labels[q] = targets.class_ids[i]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    weights = np.where(labels == k, w.no_object, 1.0)
    ce = -(logp[np.arange(n), labels] * weights).sum() / weights.sum()

    qidx = np.asarray(assign)
    boxes = pred.boxes.data[:, qidx]
    vis = targets.visibility.astype(np.float64)
    diff = np.abs(boxes - targets.boxes) * vis[..., None]
    box = diff.sum() / (4.0 * max(vis.sum(), 1.0))

    ml = pred.mask_logits.data[:, qidx]
    p = 1.0 / (1.0 + np.exp(-ml))
    gt = targets.masks
    bce = -(gt * np.log(p) + (1 - gt) * np.log(1 - p)).mean()
    num = 2.0 * (p * gt).sum(axis=(0, 2, 3)) + 1.0
    den = p.sum(axis=(0, 2, 3)) + gt.sum(axis=(0, 2, 3)) + 1.0
    dice = (1.0 - num / den).mean()
    total = (w.classification * ce + w.box_l1 * box + w.dice * dice + w.bce * bce)
    return total, {"class": ce, "box": box, "bce": bce, "dice": dice}


def test_loss_matches_straight_line_reimplementation():
    rng = np.random.default_rng(7)
    pred = make_pred(rng, n=5, t=3)
    targets = make_targets(rng, g=2, t=3)
    assign = np.array([3, 1])
    w = LossWeights()
    total, parts = supervised_loss(pred, targets, assign, w)
    ref_total, ref_parts = straight_line_loss(pred, targets, assign, w)
    for key in ref_parts:
        assert parts[key] == pytest.approx(ref_parts[key], rel=1e-4), key
    assert total.item() == pytest.approx(ref_total, rel=1e-4)


def test_no_instances_only_classification_term():
    rng = np.random.default_rng(8)
    pred = make_pred(rng, n=3)
    targets = Targets(
        class_ids=np.zeros(0, dtype=np.int64),
        boxes=np.zeros((2, 0, 4), dtype=np.float32),
        visibility=np.zeros((2, 0), dtype=bool),
        masks=np.zeros((2, 0, 4, 4), dtype=np.float32),
    )
    total, parts = supervised_loss(pred, targets, np.zeros(0, dtype=np.int64))
    assert parts["box"] == 0.0 and parts["dice"] == 0.0 and parts["bce"] == 0.0
    assert parts["class"] > 0.0


def test_log_softmax_matches_reference():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 5)).astype(np.float32) * 10
    got = log_softmax(Tensor(x)).data
    z = x - x.max(axis=1, keepdims=True)
    ref = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(got, ref, atol=1e-6)


# --- target preparation ------------------------------------------------------------


def test_downsample_mask_area_average():
    m = np.zeros((4, 4), dtype=np.float32)
    m[:2, :2] = 1.0
    out = downsample_mask(m, (2, 2))
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])
    partial = downsample_mask(np.eye(4, dtype=np.float32), (2, 2))
    np.testing.assert_array_equal(partial, [[0.5, 0.0], [0.0, 0.5]])


def test_build_targets_normalizes_boxes():
    from vidseg.data import InstanceAnnotation, VideoSample

    t, h, w = 2, 16, 16
    masks = np.zeros((t, h, w), dtype=np.uint8)
    masks[:, 4:8, 2:6] = 1
    sample = VideoSample(
        frames=np.zeros((t, 3, h, w), dtype=np.float32),
        instances=[
            InstanceAnnotation(
                class_id=1,
                masks=masks,
                boxes=np.array([[3.5, 5.5, 4, 4]] * t, dtype=np.float32),
                visibility=np.ones(t, dtype=bool),
            )
        ],
        seed=0,
    )
    targets = build_targets(sample, (4, 4))
    np.testing.assert_allclose(
        targets.boxes[0, 0], [3.5 / 16, 5.5 / 16, 0.25, 0.25]
    )
    assert targets.masks.shape == (t, 1, 4, 4)


# --- prediction heads ----------------------------------------------------------------


def test_predict_shape_contract():
    rng = np.random.default_rng(10)
    heads = PredictionHeads(rng, dim=8, num_classes=3)
    inst = Tensor(rng.normal(size=(2, 8)).astype(np.float32))
    box_feats = Tensor(rng.normal(size=(3, 2, 8)).astype(np.float32))
    finest = ScaleFeatures(
        Tensor(rng.normal(size=(16 * 16, 3, 8)).astype(np.float32)), 16, 16
    )
    pred = heads(inst, box_feats, finest)
    assert pred.class_logits.shape == (2, 4)
    assert pred.boxes.shape == (3, 2, 4)
    assert pred.mask_logits.shape == (3, 2, 16, 16)


def test_zero_controller_gives_half_masks():
    rng = np.random.default_rng(11)
    heads = PredictionHeads(rng, dim=8, num_classes=3)
    heads.controller.w.data[:] = 0.0
    heads.controller.b.data[:] = 0.0
    inst = Tensor(rng.normal(size=(2, 8)).astype(np.float32))
    box_feats = Tensor(rng.normal(size=(2, 2, 8)).astype(np.float32))
    finest = ScaleFeatures(
        Tensor(rng.normal(size=(16, 2, 8)).astype(np.float32)), 4, 4
    )
    pred = heads(inst, box_feats, finest)
    np.testing.assert_array_equal(pred.mask_logits.data, 0.0)
    np.testing.assert_array_equal(
        sigmoid(pred.mask_logits).data, np.full((2, 2, 4, 4), 0.5)
    )


def test_dynamic_filters_match_per_instance_matmul_oracle():
    rng = np.random.default_rng(12)
    heads = PredictionHeads(rng, dim=8, num_classes=3, mask_dim=4)
    for p in heads.parameters():
        p.data = rng.normal(0, 0.4, p.shape).astype(np.float32)
    inst = Tensor(rng.normal(size=(3, 8)).astype(np.float32))
    box_feats = Tensor(rng.normal(size=(2, 3, 8)).astype(np.float32))
    finest = ScaleFeatures(
        Tensor(rng.normal(size=(16, 2, 8)).astype(np.float32)), 4, 4
    )
    pred = heads(inst, box_feats, finest)

    from vidseg.model import to_grid
    from vidseg.tensor import gelu, conv2d

    grid = to_grid(finest.data, 4, 4)
    feats = conv2d(
        gelu(conv2d(grid, heads.mask_conv1.w, heads.mask_conv1.b, 1, 1)),
        heads.mask_conv2.w, heads.mask_conv2.b, 1, 1,
    ).data
    ctrl = inst.data @ heads.controller.w.data + heads.controller.b.data
    for t in range(2):
        for i in range(3):
            expect = np.zeros((4, 4), dtype=np.float64)
            for c in range(4):
                expect += ctrl[i, c] * feats[t, c]
            expect += ctrl[i, 4]
            np.testing.assert_allclose(
                pred.mask_logits.data[t, i], expect, atol=1e-5
            )


# --- discriminator input and adversarial losses ------------------------------------------


def test_disc_input_channel_count_and_order():
    rng = np.random.default_rng(13)
    c = 8
    frames = rng.random((2, 3, 32, 32)).astype(np.float32)
    finest = ScaleFeatures(
        Tensor(np.zeros((16, 2, c), dtype=np.float32)), 4, 4
    )
    mask = Tensor(np.zeros((2, 1, 4, 4), dtype=np.float32))
    stack = build_disc_input(frames, finest, mask)
    assert stack.shape == (2, 3 + c + 1, 4, 4)
    assert np.any(stack.data[:, :3] != 0)  # image channels
    np.testing.assert_array_equal(stack.data[:, 3:], 0.0)  # E and M zero


def test_disc_input_resize_at_equal_resolution_is_identity():
    rng = np.random.default_rng(14)
    frames = rng.random((2, 3, 4, 4)).astype(np.float32)
    finest = ScaleFeatures(
        Tensor(rng.normal(size=(16, 2, 2)).astype(np.float32)), 4, 4
    )
    mask = Tensor(rng.random((2, 1, 4, 4)).astype(np.float32))
    stack = build_disc_input(frames, finest, mask)
    np.testing.assert_allclose(stack.data[:, :3], frames, atol=1e-6)


def test_adversarial_closed_form_at_half():
    # discriminator forced to output exactly 0.5 everywhere
    rng = np.random.default_rng(15)
    disc = Discriminator(rng, feat_dim=2, width=2)
    for p in disc.parameters():
        p.data[:] = 0.0
    f = Tensor(rng.random((1, 6, 8, 8)).astype(np.float32))
    g = Tensor(rng.random((1, 6, 8, 8)).astype(np.float32))
    loss_d, loss_g = adversarial_losses(f, g, disc, lambda_feat=10.0)
    assert loss_d.item() == pytest.approx(2.0 * np.log(2.0), rel=1e-6)
    # L1 term vanishes: D(real) == D(fake) == 0.5
    assert loss_g.item() == pytest.approx(np.log(2.0), rel=1e-6)


def test_adversarial_closed_form_at_fixed_scores(monkeypatch):
    import vidseg.heads as H

    class FakeDisc:
        def __init__(self, real_val, fake_val):
            self.vals = [real_val, fake_val]
            self.i = 0

        def __call__(self, x):
            v = self.vals[self.i % 2]
            self.i += 1
            return Tensor(np.full((1, 1, 2, 2), v, dtype=np.float32))

    loss_d, _ = adversarial_losses(
        Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))),
        FakeDisc(0.9, 0.1), lambda_feat=0.0,
    )
    assert loss_d.item() == pytest.approx(-2 * np.log(0.9), rel=1e-5)


def test_adversarial_gradient_reaches_fake_stack():
    rng = np.random.default_rng(16)
    disc = Discriminator(rng, feat_dim=2, width=2)
    f_real = Tensor(rng.random((1, 6, 8, 8)).astype(np.float32))
    f_fake = Tensor(rng.random((1, 6, 8, 8)).astype(np.float32),
                    requires_grad=True)
    with Tape() as tape:
        _, loss_g = adversarial_losses(f_real, f_fake, disc, lambda_feat=10.0)
        tape.backward(loss_g)
    assert f_fake.grad is not None
    assert np.all(np.isfinite(f_fake.grad))
    assert np.any(f_fake.grad != 0)


def test_foreground_union_is_elementwise_max():
    rng = np.random.default_rng(17)
    m = rng.random((2, 3, 4, 4)).astype(np.float32)
    out = foreground_union(Tensor(m))
    np.testing.assert_allclose(out.data[:, 0], m.max(axis=1), atol=1e-7)


def test_loss_component_nonnegativity():
    rng = np.random.default_rng(18)
    for _ in range(5):
        pred = make_pred(rng)
        targets = make_targets(rng)
        assign, _ = hungarian_match(pred, targets)
        total, parts = supervised_loss(pred, targets, assign)
        for key, value in parts.items():
            assert value >= 0.0, key
        assert total.item() >= 0.0
