"""Synthetic moving-shapes video clips with exact instance annotations.

Clips are rendered from explicit motion scripts: each instance is a circle,
rectangle or triangle following a per-frame center/scale/aspect sequence over
a textured noise background. Rasterization is aliasing-free (a pixel belongs
to a shape iff its center does), so masks are exactly binary, boxes are the
exact tight boxes of the masks, and rendering is bit-reproducible per seed.

Instance masks record the full shape region; frames draw instances in index
order, so a later instance can occlude an earlier one in the image while
both keep their full masks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import bilinear_resize

SHAPE_CLASSES = ("circle", "rectangle", "triangle")
MIN_SHAPE_PX = 4.0

FAST_MOTION = "fast_motion"
SIZE_CHANGE = "size_change"
ASPECT_CHANGE = "aspect_change"
ATTRIBUTES = (FAST_MOTION, SIZE_CHANGE, ASPECT_CHANGE)

# classification thresholds: displacement of at least 30% of the previous
# frame's size; max/min size or aspect ratio strictly greater than 1.5
MOTION_THRESHOLD = 0.30
RATIO_THRESHOLD = 1.5


class SpecError(ValueError):
    """Raised for motion scripts that cannot be rendered as specified."""


@dataclass
class ShapeTrack:
    """Motion script of one instance."""

    shape: str
    color: tuple
    size: float  # nominal extent in pixels at scale 1, aspect 1
    centers: np.ndarray  # [T, 2] (cx, cy) in pixels
    scales: np.ndarray  # [T]
    aspects: np.ndarray  # [T] width / height

    def extent(self, t):
        """(width, height) of the shape at frame t."""
        s = self.size * self.scales[t]
        a = np.sqrt(self.aspects[t])
        return s * a, s / a

    def validate(self, frames):
        if self.shape not in SHAPE_CLASSES:
            raise SpecError(f"unknown shape {self.shape!r}")
        for arr, name in ((self.centers, "centers"), (self.scales, "scales"),
                          (self.aspects, "aspects")):
            if len(arr) != frames:
                raise SpecError(f"{name} has {len(arr)} entries for T={frames}")
        for t in range(frames):
            w, h = self.extent(t)
            if w < MIN_SHAPE_PX or h < MIN_SHAPE_PX:
                raise SpecError(
                    f"shape collapses below {MIN_SHAPE_PX}px at frame {t}: "
                    f"{w:.1f}x{h:.1f}"
                )

    def to_json(self):
        return {
            "shape": self.shape,
            "color": list(self.color),
            "size": self.size,
            "centers": np.asarray(self.centers, dtype=float).tolist(),
            "scales": np.asarray(self.scales, dtype=float).tolist(),
            "aspects": np.asarray(self.aspects, dtype=float).tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            shape=obj["shape"],
            color=tuple(obj["color"]),
            size=float(obj["size"]),
            centers=np.asarray(obj["centers"], dtype=np.float64),
            scales=np.asarray(obj["scales"], dtype=np.float64),
            aspects=np.asarray(obj["aspects"], dtype=np.float64),
        )


@dataclass
class ClipSpec:
    frames: int
    height: int
    width: int
    tracks: list
    corrupt_frames: list = field(default_factory=list)  # heavy-noise frames

    def to_json(self):
        return {
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "tracks": [tr.to_json() for tr in self.tracks],
            "corrupt_frames": [int(t) for t in self.corrupt_frames],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            frames=int(obj["frames"]),
            height=int(obj["height"]),
            width=int(obj["width"]),
            tracks=[ShapeTrack.from_json(t) for t in obj["tracks"]],
            corrupt_frames=[int(t) for t in obj.get("corrupt_frames", [])],
        )


@dataclass
class InstanceAnnotation:
    class_id: int
    masks: np.ndarray  # [T, H, W] uint8 in {0, 1}
    boxes: np.ndarray  # [T, 4] cxcywh in pixels, zeros when invisible
    visibility: np.ndarray  # [T] bool


@dataclass
class VideoSample:
    frames: np.ndarray  # [T, 3, H, W] float32 in [0, 1]
    instances: list
    seed: int
    attributes: tuple = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# Rasterization


def _pixel_grid(height, width):
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def rasterize(track, t, height, width):
    """Binary mask of one track at frame t; pixel-center membership test."""
    w, h = track.extent(t)
    cx, cy = float(track.centers[t][0]), float(track.centers[t][1])
    yy, xx = _pixel_grid(height, width)
    if track.shape == "circle":
        mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    elif track.shape == "rectangle":
        mask = (
            (xx >= cx - w / 2) & (xx < cx + w / 2)
            & (yy >= cy - h / 2) & (yy < cy + h / 2)
        )
    else:  # isoceles triangle, apex up
        top = cy - h / 2
        bot = cy + h / 2
        inside_y = (yy >= top) & (yy < bot)
        frac = np.clip((yy - top) / h, 0.0, 1.0)
        half_width = frac * (w / 2)
        mask = inside_y & (np.abs(xx - cx) <= half_width)
    return mask.astype(np.uint8)


def tight_box(mask):
    """Exact cxcywh box of a binary mask; None when empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return np.array(
        [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0 + 1.0, y1 - y0 + 1.0],
        dtype=np.float32,
    )


def _background(rng, frames, height, width):
    """Smooth textured noise, identical across frames, quantized to u8/255."""
    coarse = rng.integers(40, 180, size=(3, max(2, height // 8),
                                         max(2, width // 8))).astype(np.float64)
    smooth = bilinear_resize(coarse, (height, width))
    quant = np.clip(np.rint(smooth), 0, 255).astype(np.uint8)
    return np.repeat(quant[None], frames, axis=0)  # [T, 3, H, W]


def generate(spec, seed):
    """Render a clip; deterministic in (spec, seed)."""
    for track in spec.tracks:
        track.validate(spec.frames)
    if not 1 <= len(spec.tracks) <= 4:
        raise SpecError(f"need 1..4 instances, got {len(spec.tracks)}")
    rng = np.random.default_rng(seed)
    canvas = _background(rng, spec.frames, spec.height, spec.width)
    instances = []
    all_masks = []
    for track in spec.tracks:
        masks = np.stack(
            [rasterize(track, t, spec.height, spec.width) for t in range(spec.frames)]
        )
        all_masks.append(masks)
        boxes = np.zeros((spec.frames, 4), dtype=np.float32)
        vis = np.zeros(spec.frames, dtype=bool)
        for t in range(spec.frames):
            box = tight_box(masks[t])
            if box is not None:
                boxes[t] = box
                vis[t] = True
        instances.append(
            InstanceAnnotation(
                class_id=SHAPE_CLASSES.index(track.shape),
                masks=masks,
                boxes=boxes,
                visibility=vis,
            )
        )
    # paint in index order: later instances occlude earlier ones
    for track, masks in zip(spec.tracks, all_masks):
        color = np.asarray(track.color, dtype=np.uint8)
        for t in range(spec.frames):
            sel = masks[t].astype(bool)
            for c in range(3):
                canvas[t, c][sel] = color[c]
    # appearance corruption: blend marked frames with heavy noise while the
    # annotations keep describing the true geometry
    for t in spec.corrupt_frames:
        noise = rng.integers(0, 256, size=(3, spec.height, spec.width))
        canvas[t] = ((canvas[t].astype(np.uint16) + noise) // 2).astype(np.uint8)
    frames = canvas.astype(np.float32) / 255.0
    sample = VideoSample(frames=frames, instances=instances, seed=int(seed))
    sample.attributes = tuple(sorted(classify_attributes(sample)))
    return sample


# ---------------------------------------------------------------------------
# Attribute classification


def instance_attributes(boxes, visibility):
    """Attribute set of one instance from its per-frame tight boxes."""
    found = set()
    vis_idx = np.flatnonzero(visibility)
    if vis_idx.size == 0:
        return found
    w = boxes[vis_idx, 2].astype(np.float64)
    h = boxes[vis_idx, 3].astype(np.float64)
    sizes = np.sqrt(w * h)
    aspects = w / h
    if sizes.max() / sizes.min() > RATIO_THRESHOLD:
        found.add(SIZE_CHANGE)
    if aspects.max() / aspects.min() > RATIO_THRESHOLD:
        found.add(ASPECT_CHANGE)
    for a, b in zip(vis_idx[:-1], vis_idx[1:]):
        if b != a + 1:
            continue  # displacement is defined between consecutive frames
        d = np.hypot(
            float(boxes[b, 0]) - float(boxes[a, 0]),
            float(boxes[b, 1]) - float(boxes[a, 1]),
        )
        size_prev = float(np.sqrt(boxes[a, 2] * boxes[a, 3]))
        if d >= MOTION_THRESHOLD * size_prev:
            found.add(FAST_MOTION)
    return found


def classify_attributes(sample):
    """Union of instance attributes; a video carries an attribute if any of
    its instances triggers the criterion."""
    found = set()
    for inst in sample.instances:
        found |= instance_attributes(inst.boxes, inst.visibility)
    return found


# ---------------------------------------------------------------------------
# Random scripted clips


_PALETTE = (
    (220, 40, 40), (40, 200, 60), (60, 90, 230), (230, 200, 40),
    (200, 60, 200), (40, 210, 210), (240, 130, 30), (240, 240, 240),
)


def _linear(a, b, t):
    if t == 1:
        return np.array([0.5 * (a + b)])
    return a + (b - a) * np.arange(t) / (t - 1)


def random_track(rng, frames, height, width, attributes=frozenset(),
                 color=None):
    """One scripted track; requested attributes hit their thresholds with a
    wide margin, everything else stays well below them."""
    lo = 0.20 * min(height, width)
    hi = 0.33 * min(height, width)
    size = float(rng.uniform(lo, hi))
    shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
    scales = np.ones(frames)
    aspects = np.ones(frames)
    if SIZE_CHANGE in attributes:
        ratio = float(rng.uniform(1.9, 2.3))
        scales = _linear(1.0, ratio, frames)
        if rng.random() < 0.5:
            scales = scales[::-1].copy()
        size = min(size, 0.24 * min(height, width))
    else:
        scales *= float(rng.uniform(0.95, 1.1))
    if ASPECT_CHANGE in attributes:
        ratio = float(rng.uniform(2.0, 2.4))
        aspects = _linear(1.0, ratio, frames)
        if rng.random() < 0.5:
            aspects = 1.0 / aspects
    max_scale = scales.max()
    max_w = size * max_scale * np.sqrt(aspects.max())
    max_h = size * max_scale / np.sqrt(min(aspects.min(), 1.0))
    margin_x = max_w / 2 + 2
    margin_y = max_h / 2 + 2
    if FAST_MOTION in attributes:
        step = float(rng.uniform(0.5, 0.8)) * size * scales[0]
    else:
        step = float(rng.uniform(0.0, 0.10)) * size
    span = step * (frames - 1)
    theta = float(rng.uniform(0, 2 * np.pi))
    dx, dy = span * np.cos(theta), span * np.sin(theta)
    x_lo, x_hi = margin_x, width - margin_x
    y_lo, y_hi = margin_y, height - margin_y
    if x_hi <= x_lo or y_hi <= y_lo:
        raise SpecError("frame too small for the requested shape sizes")
    # reflect the drift direction when it cannot fit; never shorten it,
    # otherwise a requested fast-motion script would fall below threshold
    if abs(dx) > x_hi - x_lo or abs(dy) > y_hi - y_lo:
        raise SpecError("trajectory span exceeds the frame")
    if dx > 0 and x_hi - dx < x_lo or dx < 0 and x_lo - dx > x_hi:
        dx = -dx
    if dy > 0 and y_hi - dy < y_lo or dy < 0 and y_lo - dy > y_hi:
        dy = -dy
    sx = float(rng.uniform(x_lo - min(dx, 0.0), x_hi - max(dx, 0.0)))
    sy = float(rng.uniform(y_lo - min(dy, 0.0), y_hi - max(dy, 0.0)))
    centers = np.stack(
        [_linear(sx, sx + dx, frames), _linear(sy, sy + dy, frames)], axis=1
    )
    if color is None:
        color = _PALETTE[int(rng.integers(len(_PALETTE)))]
    return ShapeTrack(shape=shape, color=color, size=size, centers=centers,
                      scales=np.asarray(scales), aspects=np.asarray(aspects))


def _boxes_overlap(tr_a, tr_b, frames):
    for t in range(frames):
        wa, ha = tr_a.extent(t)
        wb, hb = tr_b.extent(t)
        ax, ay = tr_a.centers[t]
        bx, by = tr_b.centers[t]
        if (abs(ax - bx) < (wa + wb) / 2 + 2) and (abs(ay - by) < (ha + hb) / 2 + 2):
            return True
    return False


def random_clip_spec(rng, frames=3, height=64, width=64, num_instances=None,
                     attributes=frozenset(), corrupt_prob=0.0):
    """A clip spec whose first track carries the requested attributes.

    With probability `corrupt_prob` one interior frame is marked for heavy
    appearance noise, making that frame unreliable on its own.
    """
    if num_instances is None:
        num_instances = int(rng.integers(1, 3))
    corrupt = []
    if frames >= 3 and float(rng.random()) < corrupt_prob:
        corrupt = [int(rng.integers(1, frames - 1))]
    tracks = []
    colors = rng.permutation(len(_PALETTE))
    for j in range(num_instances):
        want = frozenset(attributes) if j == 0 else frozenset()
        track = None
        for _ in range(40):
            try:
                candidate = random_track(rng, frames, height, width, want,
                                         color=_PALETTE[int(colors[j])])
            except SpecError:
                continue
            track = candidate
            if all(not _boxes_overlap(track, other, frames) for other in tracks):
                break
        if track is None:
            raise SpecError("could not fit requested tracks into the frame")
        tracks.append(track)
    return ClipSpec(frames=frames, height=height, width=width, tracks=tracks,
                    corrupt_frames=corrupt)


# ---------------------------------------------------------------------------
# Benchmark manifests and on-disk layout


MANIFEST_VERSION = "vidseg-benchmark-v1"


def make_benchmark(counts, seed, frames=3, height=64, width=64,
                   corrupt_prob=0.0):
    """Build a dataset manifest from per-split, per-attribute sample counts.

    `counts` maps split name -> {attribute: n}; the pseudo-attribute "plain"
    requests samples with no deformation attribute forced. Each sample
    records its spec, its seed and its classifier-verified attributes, so
    the dataset can be regenerated bit-identically from the manifest alone.
    """
    root = np.random.default_rng(seed)
    samples = []
    idx = 0
    for split in sorted(counts):
        for attr in sorted(counts[split]):
            want = frozenset() if attr == "plain" else frozenset([attr])
            if attr != "plain" and attr not in ATTRIBUTES:
                raise SpecError(f"unknown attribute {attr!r}")
            for _ in range(counts[split][attr]):
                sample_seed = int(root.integers(0, 2**63 - 1))
                spec_rng = np.random.default_rng(sample_seed)
                spec = random_clip_spec(
                    spec_rng, frames=frames, height=height, width=width,
                    attributes=want, corrupt_prob=corrupt_prob,
                )
                sample = generate(spec, sample_seed)
                samples.append(
                    {
                        "id": f"{split}_{idx:04d}",
                        "split": split,
                        "seed": sample_seed,
                        "requested": sorted(want),
                        "attributes": list(sample.attributes),
                        "spec": spec.to_json(),
                    }
                )
                idx += 1
    return {"version": MANIFEST_VERSION, "seed": int(seed), "samples": samples}


def samples_from_manifest(manifest, split=None):
    """Regenerate samples (optionally one split) from a manifest."""
    out = []
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        spec = ClipSpec.from_json(entry["spec"])
        sample = generate(spec, entry["seed"])
        sample.attributes = tuple(entry["attributes"])
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# PGM I/O


def write_pgm(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM wants a 2-d array, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path} is not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)


_CHANNELS = "rgb"


def save_sample(sample, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    t = sample.frames.shape[0]
    for i in range(t):
        for c, name in enumerate(_CHANNELS):
            arr = np.rint(sample.frames[i, c] * 255.0).astype(np.uint8)
            write_pgm(os.path.join(out_dir, f"frame_{i:03d}_{name}.pgm"), arr)
    meta = {"seed": sample.seed, "attributes": list(sample.attributes),
            "instances": []}
    for j, inst in enumerate(sample.instances):
        for i in range(t):
            write_pgm(
                os.path.join(out_dir, f"inst_{j:02d}_mask_{i:03d}.pgm"),
                inst.masks[i] * 255,
            )
        meta["instances"].append(
            {
                "class_id": int(inst.class_id),
                "class_name": SHAPE_CLASSES[inst.class_id],
                "boxes": inst.boxes.tolist(),
                "visibility": inst.visibility.astype(int).tolist(),
            }
        )
    with open(os.path.join(out_dir, "sample.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_sample(sample_dir):
    with open(os.path.join(sample_dir, "sample.json")) as fh:
        meta = json.load(fh)
    frame_files = sorted(
        f for f in os.listdir(sample_dir) if f.startswith("frame_")
    )
    t = len(frame_files) // 3
    first = read_pgm(os.path.join(sample_dir, frame_files[0]))
    frames = np.zeros((t, 3) + first.shape, dtype=np.float32)
    for i in range(t):
        for c, name in enumerate(_CHANNELS):
            arr = read_pgm(os.path.join(sample_dir, f"frame_{i:03d}_{name}.pgm"))
            frames[i, c] = arr.astype(np.float32) / 255.0
    instances = []
    for j, inst in enumerate(meta["instances"]):
        masks = np.stack(
            [
                read_pgm(os.path.join(sample_dir, f"inst_{j:02d}_mask_{i:03d}.pgm"))
                // 255
                for i in range(t)
            ]
        ).astype(np.uint8)
        instances.append(
            InstanceAnnotation(
                class_id=int(inst["class_id"]),
                masks=masks,
                boxes=np.asarray(inst["boxes"], dtype=np.float32),
                visibility=np.asarray(inst["visibility"], dtype=bool),
            )
        )
    return VideoSample(
        frames=frames,
        instances=instances,
        seed=int(meta["seed"]),
        attributes=tuple(meta["attributes"]),
    )


def write_dataset(manifest, out_dir):
    """Materialize a manifest: manifest.json plus one directory per sample."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for entry in manifest["samples"]:
        spec = ClipSpec.from_json(entry["spec"])
        sample = generate(spec, entry["seed"])
        sample.attributes = tuple(entry["attributes"])
        save_sample(sample, os.path.join(out_dir, "samples", entry["id"]))


def load_dataset(data_dir, split=None):
    """Load samples from disk; falls back to regeneration if PGMs are absent."""
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        sample_dir = os.path.join(data_dir, "samples", entry["id"])
        if os.path.isdir(sample_dir):
            out.append(load_sample(sample_dir))
        else:
            spec = ClipSpec.from_json(entry["spec"])
            sample = generate(spec, entry["seed"])
            sample.attributes = tuple(entry["attributes"])
            out.append(sample)
    return out
