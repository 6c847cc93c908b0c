"""Finite-difference validation of every backward rule.

Each registered case builds a tiny f64 problem, evaluates a scalar loss both
through the tape and through central differences, and reports the largest
relative error. Inputs are nudged away from the kink points of the few
non-smooth ops so the comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import heads as H
from . import model as M
from . import tensor as T
from .nn import Linear
from .tensor import Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_THRESHOLD = 1e-4


def finite_difference(f, params, step=DEFAULT_STEP):
    """Central-difference gradients of the scalar callable `f`."""
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads.append(g.reshape(p.shape))
    return grads


def tape_gradients(f, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    return [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]


def max_rel_error(ad, fd, floor=1e-3):
    err = 0.0
    for a, f in zip(ad, fd):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        err = max(err, float((np.abs(a - f) / denom).max()))
    return err


@dataclass
class CheckReport:
    name: str
    group: str
    max_error: float
    passed: bool


def _param(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True,
                  dtype=np.float64)


def _away_from_zero(t, margin=1e-2):
    d = t.data
    mask = np.abs(d) < margin
    sign = np.where(d[mask] >= 0, 1.0, -1.0)
    d[mask] = sign * (margin + np.abs(d[mask]))
    return t


def _reducer(rng, shape):
    """Fixed random projection to a scalar; frozen at case build time."""
    w = Tensor(rng.normal(0.0, 1.0, size=shape), dtype=np.float64)

    def reduce(x):
        return T.tsum(x * w)

    return reduce


def _randomize(module, rng, scale=0.4):
    for p in module.parameters():
        p.data = rng.normal(0.0, scale, size=p.shape)


# --- case builders ----------------------------------------------------------


def _tensor_cases(rng):
    cases = {}

    def case(name, out_shape, build, params):
        red = _reducer(rng, out_shape)
        cases[name] = (lambda: red(build()), params)

    a = _param(rng, (3, 4))
    b = _param(rng, (3, 4))
    c = _param(rng, (2, 3, 4))
    pos = Tensor(np.abs(rng.normal(1.0, 0.3, (3, 4))) + 0.5,
                 requires_grad=True, dtype=np.float64)
    case("add", (3, 4), lambda: T.add(a, b), [a, b])
    case("mul", (3, 4), lambda: T.mul(a, b), [a, b])
    case("div", (3, 4), lambda: T.div(a, pos), [a, pos])
    case("scalar_ops", (3, 4), lambda: a * 2.5 + 1.25, [a])

    mm_a = _param(rng, (2, 3, 4))
    mm_b = _param(rng, (4, 5))
    case("matmul", (2, 3, 5), lambda: T.matmul(mm_a, mm_b), [mm_a, mm_b])

    lin_x, lin_w, lin_b = _param(rng, (5, 3)), _param(rng, (3, 4)), _param(rng, (4,))
    case("linear", (5, 4), lambda: T.linear(lin_x, lin_w, lin_b),
         [lin_x, lin_w, lin_b])

    case("softmax", (2, 3, 4), lambda: T.softmax(c, axis=-1), [c])

    ln_x, gamma, beta = _param(rng, (4, 6)), _param(rng, (6,)), _param(rng, (6,))
    case("layer_norm", (4, 6), lambda: T.layer_norm(ln_x, gamma, beta),
         [ln_x, gamma, beta])

    case("gelu", (3, 4), lambda: T.gelu(a), [a])
    case("sigmoid", (3, 4), lambda: T.sigmoid(a), [a])
    case("exp", (3, 4), lambda: T.exp(a), [a])
    case("log", (3, 4), lambda: T.log(pos), [pos])

    mx_a = _away_from_zero(_param(rng, (4, 4)))
    mx_b = _away_from_zero(_param(rng, (4, 4)))
    case("leaky_relu", (4, 4), lambda: T.leaky_relu(mx_a, 0.2), [mx_a])
    case("abs", (4, 4), lambda: T.absolute(mx_a), [mx_a])
    case("maximum", (4, 4), lambda: T.maximum(mx_a, mx_b), [mx_a, mx_b])

    clip_x = _param(rng, (5, 5), scale=2.0)
    near = np.abs(np.abs(clip_x.data) - 1.0) < 1e-2
    clip_x.data[near] *= 1.2
    case("clip", (5, 5), lambda: T.clip(clip_x, -1.0, 1.0), [clip_x])

    bce_z = _param(rng, (3, 4))
    bce_t = np.clip(rng.random((3, 4)), 0.05, 0.95)
    cases["bce_with_logits"] = (lambda: T.bce_with_logits(bce_z, bce_t), [bce_z])

    case("reshape", (6, 4), lambda: T.reshape(c, (6, 4)), [c])
    case("transpose", (4, 2, 3), lambda: T.transpose(c, (2, 0, 1)), [c])
    case("concat", (3, 8), lambda: T.concat([a, b], axis=1), [a, b])
    case("stack", (2, 3, 4), lambda: T.stack([a, b], axis=0), [a, b])
    case("expand", (5, 3, 4), lambda: T.expand(a, (5, 3, 4)), [a])

    take_x = _param(rng, (4, 5))
    case("take", (3, 5), lambda: T.take(take_x, [3, 1, 1], axis=0), [take_x])

    case("sum", (3,), lambda: T.tsum(c, axis=(0, 2)), [c])
    case("mean", (2, 4), lambda: T.tmean(c, axis=1), [c])

    up = _param(rng, (2, 2, 3, 2))
    case("bilinear_upsample_x2", (2, 2, 6, 4),
         lambda: T.bilinear_upsample_x2(up), [up])

    cv_x = _param(rng, (2, 3, 5, 5))
    cv_w = _param(rng, (4, 3, 3, 3))
    cv_b = _param(rng, (4,))
    case("conv2d", (2, 4, 5, 5),
         lambda: T.conv2d(cv_x, cv_w, cv_b, stride=1, pad=1), [cv_x, cv_w, cv_b])
    case("conv2d_strided", (2, 4, 3, 3),
         lambda: T.conv2d(cv_x, cv_w, cv_b, stride=2, pad=1), [cv_x, cv_w, cv_b])
    return cases


def _attention_cases(rng):
    c = 4
    cases = {}
    intra_p = A.SelfAttentionParams(rng, c, dtype=np.float64)
    inter_p = A.SelfAttentionParams(rng, c, dtype=np.float64)
    _randomize(intra_p, rng)
    _randomize(inter_p, rng)
    z = _param(rng, (4, 2, c))
    h = _param(rng, (4, 2, c))
    red_z = _reducer(rng, (4, 2, c))
    cases["intra_scale_attention"] = (
        lambda: red_z(A.intra_scale_attention(z, intra_p)),
        [z] + intra_p.parameters(),
    )
    red_h = _reducer(rng, (4, 2, c))
    cases["inter_scale_attention"] = (
        lambda: red_h(A.inter_scale_attention(h, inter_p)),
        [h] + inter_p.parameters(),
    )

    proj = Linear(rng, 2 * c, c, bias=False, dtype=np.float64)
    fine = _param(rng, (4, 2, c))
    coarse = _param(rng, (1, 2, c))
    red_comb = _reducer(rng, (4, 2, c))
    cases["combine_scales"] = (
        lambda: red_comb(
            A.combine_scales(
                A.ScaleFeatures(fine, 2, 2), A.ScaleFeatures(coarse, 1, 1), proj
            )
        ),
        [fine, coarse] + proj.parameters(),
    )

    enr = A.MultiScaleTemporalEnricher(rng, c, 2, dtype=np.float64)
    _randomize(enr, rng)
    pyr_fine = _param(rng, (4, 2, c))
    pyr_coarse = _param(rng, (1, 2, c))
    red_f = _reducer(rng, (4, 2, c))
    red_c = _reducer(rng, (1, 2, c))

    def run_enricher():
        out = enr(
            [A.ScaleFeatures(pyr_fine, 2, 2), A.ScaleFeatures(pyr_coarse, 1, 1)]
        )
        return red_f(out[0]) + red_c(out[1])

    cases["enrichment_module"] = (
        run_enricher, [pyr_fine, pyr_coarse] + enr.parameters())
    return cases


def _model_cases(rng):
    c = 4
    cases = {}
    layer = M.EncoderLayer(rng, c, 2, dtype=np.float64)
    _randomize(layer, rng)
    x_fine = _param(rng, (4, 2, c))
    x_coarse = _param(rng, (1, 2, c))
    red_f = _reducer(rng, (4, 2, c))
    red_c = _reducer(rng, (1, 2, c))

    def run_encoder_layer():
        out = layer(
            [A.ScaleFeatures(x_fine, 2, 2), A.ScaleFeatures(x_coarse, 1, 1)]
        )
        return red_f(out[0].data) + red_c(out[1].data)

    cases["encoder_layer"] = (
        run_encoder_layer, [x_fine, x_coarse] + layer.parameters())

    dec = M.DecoderLayer(rng, c, dtype=np.float64)
    _randomize(dec, rng)
    queries = _param(rng, (2, 3, c))  # [T, n, C]
    memory = _param(rng, (2, 4, c))  # [T, S, C]
    mem_pos = M.sinusoidal_pos_2d(2, 2, c).astype(np.float64)
    red_q = _reducer(rng, (2, 3, c))
    cases["decoder_layer"] = (
        lambda: red_q(dec(queries, memory, mem_pos)),
        [queries, memory] + dec.parameters(),
    )
    return cases


def _heads_cases(rng):
    c = 4
    cases = {}
    disc = H.Discriminator(rng, feat_dim=c, width=2, dtype=np.float64)
    _randomize(disc, rng, scale=0.6)
    f_real = _param(rng, (1, 3 + c + 1, 4, 4))
    f_fake = _param(rng, (1, 3 + c + 1, 4, 4))

    cases["adversarial_loss_disc"] = (
        lambda: H.adversarial_losses(f_real, f_fake, disc, lambda_feat=10.0)[0],
        [f_real, f_fake] + disc.parameters(),
    )
    cases["adversarial_loss_encoder"] = (
        lambda: H.adversarial_losses(f_real, f_fake, disc, lambda_feat=10.0)[1],
        [f_real, f_fake] + disc.parameters(),
    )

    heads = H.PredictionHeads(rng, c, num_classes=2, mask_dim=2, dtype=np.float64)
    _randomize(heads, rng)
    inst = _param(rng, (3, c))
    box_feats = _param(rng, (2, 3, c))
    finest = _param(rng, (4, 2, c))
    red_cls = _reducer(rng, (3, 3))
    red_box = _reducer(rng, (2, 3, 4))
    red_mask = _reducer(rng, (2, 3, 2, 2))

    def run_predict():
        pred = heads(inst, box_feats, A.ScaleFeatures(finest, 2, 2))
        return (
            red_cls(pred.class_logits)
            + red_box(pred.boxes)
            + red_mask(pred.mask_logits)
        )

    cases["prediction_heads"] = (
        run_predict, [inst, box_feats, finest] + heads.parameters())
    return cases


GROUPS = {
    "tensor": _tensor_cases,
    "attention": _attention_cases,
    "model": _model_cases,
    "heads": _heads_cases,
}


def run_checks(groups=None, step=DEFAULT_STEP, threshold=DEFAULT_THRESHOLD,
               seed=0):
    """Run finite-difference checks; returns a list of CheckReport."""
    selected = list(GROUPS) if not groups else list(groups)
    reports = []
    for group in selected:
        if group not in GROUPS:
            raise KeyError(f"unknown check group {group!r}; have {sorted(GROUPS)}")
        rng = np.random.default_rng(seed)
        for name, (f, params) in GROUPS[group](rng).items():
            ad = tape_gradients(f, params)
            fd = finite_difference(lambda: f().item(), params, step=step)
            err = max_rel_error(ad, fd)
            reports.append(CheckReport(name, group, err, err < threshold))
    return reports
