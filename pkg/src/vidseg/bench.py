"""Analytic attention-cost tables plus wall-clock forward timing."""

from __future__ import annotations

import json
import time

import numpy as np

from .attention import (
    MultiScaleTemporalEnricher,
    ScaleFeatures,
    attention_flops,
)
from .tensor import Tensor

CSV_HEADER = (
    "name,levels,frames,channels,tokens,"
    "split_pairwise,split_projections,split_mlp,split_total,"
    "joint_pairwise,joint_projections,joint_mlp,joint_total,forward_ms"
)

# above this token count the timed forward is skipped (cell left empty)
TIMING_TOKEN_LIMIT = 8192


def level_sizes(entry):
    """Spatial (h, w) pairs for one grid entry.

    Either explicit `sizes: [[h, w], ...]` or `frame_height`/`frame_width`
    with a `strides` list (frames are padded up to divisibility, matching
    the conv stem).
    """
    if "sizes" in entry:
        return [tuple(hw) for hw in entry["sizes"]]
    fh, fw = entry["frame_height"], entry["frame_width"]
    return [(-(-fh // s), -(-fw // s)) for s in entry["strides"]]


def bench_entry(entry, time_forward=True):
    sizes = level_sizes(entry)
    t = int(entry["frames"])
    c = int(entry["channels"])
    s_list = [h * w for h, w in sizes]
    split = attention_flops(s_list, t, c, "split")
    joint = attention_flops(s_list, t, c, "joint")
    tokens = sum(s_list) * t
    row = {
        "name": entry.get("name", "x".join(f"{h}x{w}" for h, w in sizes)),
        "levels": len(sizes),
        "frames": t,
        "channels": c,
        "tokens": tokens,
        "split_pairwise": split.pairwise,
        "split_projections": split.projections,
        "split_mlp": split.mlp,
        "split_total": split.total,
        "joint_pairwise": joint.pairwise,
        "joint_projections": joint.projections,
        "joint_mlp": joint.mlp,
        "joint_total": joint.total,
        "forward_ms": "",
    }
    if time_forward and tokens <= TIMING_TOKEN_LIMIT and len(sizes) >= 2:
        row["forward_ms"] = round(_time_forward(sizes, t, c), 3)
    return row


def _time_forward(sizes, t, c, repeats=3):
    rng = np.random.default_rng(0)
    enricher = MultiScaleTemporalEnricher(rng, c, len(sizes))
    pyramid = [
        ScaleFeatures(
            Tensor(rng.normal(0, 1, (h * w, t, c)).astype(np.float32)), h, w
        )
        for h, w in sizes
    ]
    enricher(pyramid)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        enricher(pyramid)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_grid(grid, time_forward=True):
    return [bench_entry(e, time_forward) for e in grid["configs"]]


def to_csv(rows):
    lines = [CSV_HEADER]
    for row in rows:
        lines.append(",".join(str(row[k]) for k in CSV_HEADER.split(",")))
    return "\n".join(lines) + "\n"


def load_grid(path):
    with open(path) as fh:
        return json.load(fh)
