"""Full model assembly, the training loop, checkpoints, and experiments.

Training alternates one discriminator step and one model step per batch when
the foreground/background loss is enabled. The discriminator sees detached
feature/mask stacks; the model's adversarial term is computed against the
just-updated discriminator, whose parameters the model optimizer never
touches. All randomness flows from the config seed, so a (config, data)
pair reproduces its metrics log bit for bit.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict

import numpy as np

from .config import TrainConfig
from .data import load_dataset, samples_from_manifest
from .evaluate import (
    EvalResult,
    GroundTruthInstance,
    PredictedInstance,
    VideoEntry,
    compute_ap,
)
from .heads import (
    Discriminator,
    LossWeights,
    MatchWeights,
    PredictionHeads,
    adversarial_losses,
    build_disc_input,
    build_targets,
    downsample_mask,
    foreground_union,
    hungarian_match,
    supervised_loss,
)
from .attention import ScaleFeatures
from .model import ConvStem, Decoder, Encoder
from .nn import Module
from .optim import AdamW, NumericError
from .tensor import (
    Tape,
    Tensor,
    bilinear_resize,
    load_tensors,
    save_tensors,
    sigmoid,
    take,
)


class VisModel(Module):
    """Stem + encoder + decoder + prediction heads over a video clip."""

    def __init__(self, rng, cfg, dtype=np.float32):
        self.stem = ConvStem(rng, cfg.channels, levels=cfg.levels, dtype=dtype)
        self.encoder = Encoder(
            rng, cfg.channels, cfg.levels, cfg.depth, heads=cfg.heads,
            use_enrichment=cfg.use_enrichment, progressive=cfg.progressive,
            dtype=dtype,
        )
        self.decoder = Decoder(
            rng, cfg.channels, cfg.depth, cfg.num_queries, heads=cfg.heads,
            use_temporal=cfg.use_temporal_decoder,
            cross_all_levels=cfg.cross_all_levels, dtype=dtype,
        )
        self.heads = PredictionHeads(rng, cfg.channels, cfg.num_classes,
                                     dtype=dtype)

    def __call__(self, frames):
        pyramid = self.stem(frames)
        encoded = self.encoder(pyramid)
        box_feats, instance_feats = self.decoder(encoded)
        pred = self.heads(instance_feats, box_feats, encoded[0])
        return pred, encoded


def build_model(cfg, dtype=np.float32):
    """Seeded model (+ discriminator when the fg/bg loss is on)."""
    rng = np.random.default_rng(cfg.seed)
    model = VisModel(rng, cfg, dtype=dtype)
    disc = Discriminator(rng, cfg.channels, dtype=dtype) if cfg.use_fgbg else None
    return model, disc


def mask_resolution(cfg):
    return (cfg.image_size // 8, cfg.image_size // 8)


# ---------------------------------------------------------------------------
# Inference helpers


def predictions_to_instances(pred, image_hw):
    """Turn raw head outputs into scored binary mask sequences."""
    probs = _softmax_np(pred.class_logits.data)
    logits = pred.mask_logits.data  # [T, n, Hm, Wm]
    t, n = logits.shape[:2]
    up = bilinear_resize(logits, image_hw)
    out = []
    for q in range(n):
        cls = int(np.argmax(probs[q, :-1]))
        score = float(probs[q, cls])
        masks = up[:, q] > 0.0  # sigmoid(logit) > 0.5
        out.append(PredictedInstance(class_id=cls, score=score, masks=masks))
    return out


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def evaluate_model(model, samples):
    """AP/AR of a model over a list of VideoSamples."""
    entries = []
    for sample in samples:
        pred, _ = model(Tensor(sample.frames))
        h, w = sample.frames.shape[-2:]
        entries.append(
            VideoEntry(
                predictions=predictions_to_instances(pred, (h, w)),
                truths=[
                    GroundTruthInstance(inst.class_id, inst.masks.astype(bool))
                    for inst in sample.instances
                ],
                attributes=tuple(sample.attributes),
            )
        )
    return compute_ap(entries)


# ---------------------------------------------------------------------------
# Checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, disc, cfg, step, history):
    """Write `<path>` (manifest JSON) plus `<path minus .json>.bin`."""
    base, ext = os.path.splitext(path)
    if ext != ".json":
        base = path
        path = base + ".json"
    named = [("model." + k, v) for k, v in model.named_parameters()]
    if disc is not None:
        named += [("disc." + k, v) for k, v in disc.named_parameters()]
    extra = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "step": int(step),
        "history": history,
        "buffer": os.path.basename(base) + ".bin",
    }
    save_tensors(named, base + ".bin", path, extra=extra)
    return path


def load_checkpoint(path):
    """Rebuild (model, disc, cfg, manifest) from a checkpoint manifest."""
    base = os.path.splitext(path)[0]
    arrays, manifest = load_tensors(base + ".bin", path)
    cfg = TrainConfig(**manifest["config"])
    model, disc = build_model(cfg)
    model.load_state(
        {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    )
    if disc is not None:
        disc.load_state(
            {k[len("disc."):]: v for k, v in arrays.items() if k.startswith("disc.")}
        )
    return model, disc, cfg, manifest


# ---------------------------------------------------------------------------
# Training


def _gt_union_mask(sample, mask_hw):
    """[T, 1, Hm, Wm] soft foreground map from all instances' masks."""
    union = np.zeros(sample.frames.shape[0:1] + sample.frames.shape[-2:],
                     dtype=np.float32)
    for inst in sample.instances:
        union = np.maximum(union, inst.masks.astype(np.float32))
    return downsample_mask(union, mask_hw)[:, None]


def training_step(model, disc, batch, cfg, model_opt, disc_opt, cache=None):
    """One alternating optimization step over a batch of clips.

    `cache` optionally memoizes per-sample constants (resized frames,
    targets, foreground unions) across epochs.
    """
    mask_hw = mask_resolution(cfg)
    match_w = MatchWeights(cfg.match_class, cfg.match_box, cfg.match_dice)
    loss_w = LossWeights(cfg.w_class, cfg.w_box, cfg.w_dice, cfg.w_bce,
                         cfg.no_object_weight)
    cache = {} if cache is None else cache
    tape = Tape()
    total = None
    parts_sum = {}
    adv = []  # (f_gt const, f_pr live, f_pr detached arrays)
    with tape:
        for sample in batch:
            entry = cache.get(id(sample))
            if entry is None:
                entry = {
                    "targets": build_targets(sample, mask_hw),
                    "small_frames": bilinear_resize(sample.frames, mask_hw),
                    "gt_union": _gt_union_mask(sample, mask_hw),
                }
                cache[id(sample)] = entry
            targets = entry["targets"]
            pred, pyramid = model(Tensor(sample.frames))
            assign, _ = hungarian_match(pred, targets, match_w)
            loss, parts = supervised_loss(pred, targets, assign, loss_w)
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
            total = loss if total is None else total + loss
            if disc is not None and targets.count:
                finest = pyramid[0]
                matched = take(pred.mask_logits, np.asarray(assign), axis=1)
                m_pred = foreground_union(sigmoid(matched))
                f_pr_live = build_disc_input(entry["small_frames"], finest,
                                             m_pred)
                finest_const = ScaleFeatures(
                    finest.data.detach(), finest.height, finest.width
                )
                m_gt = Tensor(entry["gt_union"])
                f_gt = build_disc_input(entry["small_frames"], finest_const,
                                        m_gt)
                f_pr_const = Tensor(f_pr_live.data.copy())
                adv.append((f_gt, f_pr_live, f_pr_const))
        total = total * (1.0 / len(batch))

    stats = {k: v / len(batch) for k, v in parts_sum.items()}

    if disc is not None and adv:
        # discriminator step on detached stacks
        disc.zero_grad()
        with Tape() as dtape:
            loss_d = None
            for f_gt, _, f_pr_const in adv:
                ld, _ = adversarial_losses(f_gt, f_pr_const, disc,
                                           cfg.lambda_feat)
                loss_d = ld if loss_d is None else loss_d + ld
            loss_d = loss_d * (1.0 / len(adv))
            dtape.backward(loss_d)
        disc_opt.step()
        stats["disc"] = loss_d.item()
        # adversarial term for the model, against the updated discriminator
        with tape:
            loss_g = None
            for f_gt, f_pr_live, _ in adv:
                _, lg = adversarial_losses(f_gt, f_pr_live, disc,
                                           cfg.lambda_feat)
                loss_g = lg if loss_g is None else loss_g + lg
            loss_g = loss_g * (1.0 / len(adv))
            total = total + loss_g * cfg.fgbg_weight
        stats["fgbg"] = loss_g.item()

    stats["total"] = total.item()
    if not np.isfinite(stats["total"]):
        raise NumericError("training loss is not finite")
    model.zero_grad()
    if disc is not None:
        disc.zero_grad()  # discard any stale gradients before model backward
    tape.backward(total)
    model_opt.step()
    return stats


def train(cfg, train_samples, val_samples=None, out_dir=None,
          log_name="metrics.jsonl", quiet=False):
    """Run the full schedule; returns (model, disc, history)."""
    model, disc = build_model(cfg)
    model_opt = AdamW.for_module(
        model, cfg.lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
        mult_prefixes=("stem.",), mult=cfg.backbone_lr_mult,
    )
    disc_opt = (
        AdamW.for_module(disc, cfg.lr, betas=(cfg.beta1, cfg.beta2),
                         weight_decay=cfg.weight_decay)
        if disc is not None
        else None
    )
    data_rng = np.random.default_rng(cfg.seed + 0x5EED)
    history = []
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, log_name)
        with open(log_path, "w"):
            pass
    step = 0
    cache = {}
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.json"), model, disc,
                        cfg, step, history)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        model_opt.lr = lr
        if disc_opt is not None:
            disc_opt.lr = lr
        order = data_rng.permutation(len(train_samples))
        epoch_stats = {}
        batches = 0
        t0 = time.perf_counter()
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            stats = training_step(model, disc, batch, cfg, model_opt, disc_opt,
                                  cache=cache)
            for k, v in stats.items():
                epoch_stats[k] = epoch_stats.get(k, 0.0) + v
            batches += 1
            step += 1
        record = {"epoch": epoch, "lr": lr, "steps": step}
        record.update({k: v / batches for k, v in sorted(epoch_stats.items())})
        if val_samples:
            record["val_ap"] = round(evaluate_model(model, val_samples).ap, 4)
        history.append(record)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "checkpoint.json"), model,
                            disc, cfg, step, history)
        if not quiet:
            dt = time.perf_counter() - t0
            shown = {k: round(v, 4) for k, v in record.items() if k != "epoch"}
            print(f"epoch {epoch}: {shown} ({dt:.1f}s)", flush=True)
    return model, disc, history


def load_training_data(data_path, split):
    """Accept either a dataset directory or a bare manifest.json path."""
    if os.path.isdir(data_path):
        return load_dataset(data_path, split=split)
    with open(data_path) as fh:
        manifest = json.load(fh)
    return samples_from_manifest(manifest, split=split)


# ---------------------------------------------------------------------------
# Attention-map export


def visualize_attention(ckpt_path, sample_dir, out_dir):
    """Write per-frame encoder activation-strength maps as PGM images.

    The map at each finest-level position is the mean |feature| across
    channels, min-max normalized over the whole video (an all-constant video
    maps to black). A horizontal strip montage joins the frames.
    """
    from .data import load_sample, write_pgm

    model, _, _, _ = load_checkpoint(ckpt_path)
    sample = load_sample(sample_dir)
    _, pyramid = model(Tensor(sample.frames))
    finest = pyramid[0]
    strength = np.abs(finest.data.data).mean(axis=2)  # [S, T]
    maps = strength.reshape(finest.height, finest.width, -1).transpose(2, 0, 1)
    lo, hi = maps.min(), maps.max()
    maps = (maps - lo) / (hi - lo) if hi > lo else np.zeros_like(maps)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    frames = []
    for t in range(maps.shape[0]):
        img = np.rint(maps[t] * 255.0).astype(np.uint8)
        path = os.path.join(out_dir, f"attention_{t:03d}.pgm")
        write_pgm(path, img)
        paths.append(path)
        frames.append(img)
        frames.append(np.full((img.shape[0], 2), 255, dtype=np.uint8))
    strip = np.concatenate(frames[:-1], axis=1)
    strip_path = os.path.join(out_dir, "attention_strip.pgm")
    write_pgm(strip_path, strip)
    paths.append(strip_path)
    return paths


# ---------------------------------------------------------------------------
# Ablation experiment


# per-split, per-attribute sample counts of the standard desk benchmark
ABLATION_BENCHMARK = {
    "train": {"fast_motion": 16, "size_change": 12, "aspect_change": 8,
              "plain": 12},
    "val": {"fast_motion": 8, "size_change": 6, "aspect_change": 4,
            "plain": 6},
}


ABLATION_VARIANTS = (
    ("baseline", {"use_enrichment": False, "use_temporal_decoder": False,
                  "use_fgbg": False}),
    ("+multiscale-temporal", {"use_enrichment": True,
                              "use_temporal_decoder": False,
                              "use_fgbg": False}),
    ("+temporal-decoder", {"use_enrichment": True,
                           "use_temporal_decoder": True, "use_fgbg": False}),
    ("+fgbg-loss", {"use_enrichment": True, "use_temporal_decoder": True,
                    "use_fgbg": True}),
)


def run_ablation(cfg, train_samples, val_samples, seeds=(0, 1, 2),
                 out_dir=None, quiet=False):
    """Train every variant on every seed; returns rows and per-variant means."""
    rows = []
    for name, flags in ABLATION_VARIANTS:
        for seed in seeds:
            variant_cfg = cfg.variant(seed=seed, **flags)
            model, _, _ = train(variant_cfg, train_samples, quiet=True)
            result = evaluate_model(model, val_samples)
            row = {
                "variant": name, "seed": seed,
                "ap": round(result.ap, 4), "ap50": round(result.ap50, 4),
                "ap75": round(result.ap75, 4),
                "per_attribute": {k: round(v, 4)
                                  for k, v in result.per_attribute.items()},
            }
            rows.append(row)
            if not quiet:
                print(f"{name:24s} seed={seed} AP={row['ap']:.2f} "
                      f"AP50={row['ap50']:.2f}", flush=True)
    means = {}
    for name, _ in ABLATION_VARIANTS:
        sel = [r for r in rows if r["variant"] == name]
        means[name] = {
            "ap": float(np.mean([r["ap"] for r in sel])),
            "ap50": float(np.mean([r["ap50"] for r in sel])),
            "ap75": float(np.mean([r["ap75"] for r in sel])),
        }
        attrs = sorted({a for r in sel for a in r["per_attribute"]})
        for attr in attrs:
            vals = [r["per_attribute"].get(attr) for r in sel]
            vals = [v for v in vals if v is not None]
            means[name][f"ap[{attr}]"] = float(np.mean(vals)) if vals else 0.0
    report = {"rows": rows, "means": means, "seeds": list(seeds)}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
        with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
            fh.write(ablation_table(report))
    return report


def ablation_table(report):
    header = f"{'variant':26s} {'mean AP':>8s} {'AP50':>8s} {'AP75':>8s}"
    lines = [header, "-" * len(header)]
    for name, _ in ABLATION_VARIANTS:
        m = report["means"][name]
        lines.append(
            f"{name:26s} {m['ap']:8.2f} {m['ap50']:8.2f} {m['ap75']:8.2f}"
        )
    return "\n".join(lines) + "\n"
