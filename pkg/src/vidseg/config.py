"""Training configuration and the flat key=value config file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


@dataclass
class TrainConfig:
    # optimization
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    backbone_lr_mult: float = 0.1
    lr_drop_epochs: list = field(default_factory=lambda: [4, 10])
    epochs: int = 12
    batch_size: int = 2
    # model (desk-scale defaults; see configs/paper.cfg for full-scale values)
    frames: int = 3
    channels: int = 32
    levels: int = 2
    depth: int = 2
    num_queries: int = 8
    heads: int = 1
    num_classes: int = 3
    image_size: int = 64
    progressive: bool = True
    cross_all_levels: bool = False
    # ablation switches
    use_enrichment: bool = True
    use_temporal_decoder: bool = True
    use_fgbg: bool = True
    # loss weights
    w_class: float = 2.0
    w_box: float = 5.0
    w_dice: float = 2.0
    w_bce: float = 2.0
    no_object_weight: float = 0.1
    match_class: float = 2.0
    match_box: float = 5.0
    match_dice: float = 2.0
    fgbg_weight: float = 0.5
    lambda_feat: float = 10.0
    seed: int = 0

    def lr_at(self, epoch):
        """Closed-form schedule: base lr scaled by 0.1 at each drop epoch."""
        drops = sum(1 for d in self.lr_drop_epochs if epoch >= d)
        return self.lr * (0.1 ** drops)

    def variant(self, **overrides):
        cfg = TrainConfig(**asdict(self))
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown config field {key!r}")
            setattr(cfg, key, value)
        return cfg

    def to_text(self):
        return format_config(asdict(self))

    @classmethod
    def from_text(cls, text):
        values = parse_config(text)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, str) else str(value)


def format_config(values):
    lines = [f"{key} = {_format_value(values[key])}" for key in values]
    return "\n".join(lines) + "\n"


def _parse_scalar(text):
    t = text.strip()
    if t in ("true", "false"):
        return t == "true"
    if t.startswith(("'", '"')) and t.endswith(t[0]) and len(t) >= 2:
        return t[1:-1]
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def parse_config(text):
    """Parse flat `key = value` lines; '#' starts a comment.

    Values are ints, floats, `true`/`false`, quoted strings, or
    comma-separated lists of those.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value: {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out
