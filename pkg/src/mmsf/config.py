"""Run configuration: a flat ``key = value`` text file with typed fields."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import RegressionKind
from .network import ModelConfig


@dataclass
class RunConfig:
    seed: int = 7
    image_size: int = 128
    anchor_scales: tuple = (32, 64, 128, 256)
    anchor_ratios: tuple = (0.6, 1.0, 1.1)
    lam: float = 2.0
    regression: str = "iou"
    sfe: bool = True
    smoothing_conv: bool = True
    units_per_block: int = 1
    stem_channels: int = 8
    block_channels: tuple = (16, 32, 64, 128)
    sfe_width: int = 32
    fc_width: int = 128
    lr: float = 0.02
    weight_decay: float = 0.0001
    momentum: float = 0.9
    epochs: int = 12
    batch_size: int = 8
    warmup_iters: int = 100
    grad_clip: float = 10.0
    flip: bool = True
    val_fraction: float = 0.1
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pre_nms: int = 200
    rpn_post_nms: int = 50
    rpn_nms: float = 0.7
    roi_pos_iou: float = 0.5
    roi_per_image: int = 16
    nms_iou: float = 0.5
    score_thresh: float = 0.05
    n_train: int = 500
    n_test: int = 100
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        RegressionKind.parse(self.regression)
        checks = [
            (self.image_size > 0 and self.image_size % 32 == 0, "image_size must be a positive multiple of 32"),
            (len(self.anchor_scales) == 4 and all(s > 0 for s in self.anchor_scales), "need four positive anchor scales"),
            (len(self.anchor_ratios) >= 1 and all(r > 0 for r in self.anchor_ratios), "anchor ratios must be positive"),
            (self.lam > 0, "lam must be positive"),
            (self.lr > 0 and self.weight_decay >= 0 and 0 <= self.momentum < 1, "bad optimiser settings"),
            (self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1"),
            (0 < self.rpn_neg_iou <= self.rpn_pos_iou < 1, "need 0 < rpn_neg_iou <= rpn_pos_iou < 1"),
            (0 < self.roi_pos_iou < 1, "roi_pos_iou must lie in (0, 1)"),
            (0 < self.nms_iou < 1 and 0 < self.rpn_nms < 1, "NMS thresholds must lie in (0, 1)"),
            (0 <= self.score_thresh < 1, "score_thresh must lie in [0, 1)"),
            (0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)"),
            (self.units_per_block in (1, 2), "units_per_block must be 1 or 2"),
            (self.n_train >= 1 and self.n_test >= 1, "n_train and n_test must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size, stem_channels=self.stem_channels,
            block_channels=tuple(self.block_channels), units_per_block=self.units_per_block,
            sfe_width=self.sfe_width, use_sfe=self.sfe, smoothing_conv=self.smoothing_conv,
            fc_width=self.fc_width, anchor_scales=tuple(self.anchor_scales),
            anchor_ratios=tuple(self.anchor_ratios), rpn_pre_nms=self.rpn_pre_nms,
            rpn_post_nms=self.rpn_post_nms, rpn_nms=self.rpn_nms,
            score_thresh=self.score_thresh, nms_iou=self.nms_iou,
        )

    # ------------------------------------------------------------ text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(**parse_overrides(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig.__new__(RunConfig)
for _f in fields(RunConfig):
    setattr(_DEFAULTS, _f.name, _f.default)


def coerce(key: str, raw) -> object:
    """Convert a raw string (or value) to the type of field ``key``."""
    if key not in _FIELDS:
        raise ValueError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(float(p)) if kind is int else kind(p) for p in raw.replace("[", "").replace("]", "").split(",") if p.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_overrides(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def patch_config_file(path, **changes) -> RunConfig:
    """Rewrite ``path`` with ``changes`` applied, keeping every other value."""
    path = Path(path)
    cfg = RunConfig.load(path) if path.exists() else RunConfig()
    cfg = cfg.replace(**{k: coerce(k, v) for k, v in changes.items()})
    cfg.save(path)
    return cfg
