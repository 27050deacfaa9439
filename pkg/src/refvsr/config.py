"""Run configuration: one plain-text ``key=value`` file plus overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import CONFIDENCE_SOURCES, LossConfig
from .model import ModelConfig

WIDTHS = {"default": 32, "small": 16}


@dataclass
class RunConfig:
    # model
    width: str = "default"
    zoom: int = 2
    simplified_fusion: bool = False
    gate_activation: str = "none"
    num_blocks: int = 2
    init_confidence: float = 0.0
    # losses
    lambda_rec: float = 0.01
    lambda_pre: float = 0.05
    lambda_8k: float = 0.1
    window_k: int = 7
    confidence_source: str = "fresh"
    # optimizer
    lr: float = 2.0e-4
    lr_min: float = 1.0e-6
    rectify: bool = True
    grad_clip: float = 0.0
    pretrain_steps: int = 2000
    adapt_steps: int = 500
    # data
    data_dir: str = "data"
    clips: int = 8
    frames: int = 8
    height: int = 256
    width_px: int = 384
    motion: float = 2.0
    holdout: int = 1
    seq_len: int = 8
    batch_size: int = 2
    pretrain_lr_size: int = 64
    adapt_lr_size: int = 128
    jitter: int = 4
    # run
    seed: int = 0
    out_dir: str = "runs"
    log_every: int = 50
    save_every: int = 0
    tile_budget_mb: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        if self.width not in WIDTHS:
            raise ValueError(f"width must be one of {sorted(WIDTHS)}, got {self.width!r}")
        if self.zoom < 1 or self.zoom & (self.zoom - 1):
            raise ValueError("zoom must be a power of two")
        if self.gate_activation not in ("none", "sigmoid", "relu"):
            raise ValueError("gate_activation must be none, sigmoid or relu")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ValueError(f"confidence_source must be one of {CONFIDENCE_SOURCES}")
        for name in ("num_blocks", "pretrain_steps", "adapt_steps", "clips", "frames",
                     "seq_len", "batch_size", "tile_budget_mb", "log_every"):
            if getattr(self, name) < (0 if name.endswith("steps") else 1):
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.holdout < self.clips:
            raise ValueError("holdout must leave at least one training clip")
        if self.seq_len > self.frames:
            raise ValueError("seq_len cannot exceed frames per clip")
        if self.height % 8 or self.width_px % 8:
            raise ValueError("frame height and width must be divisible by 8")
        if not 0 < self.lr_min <= self.lr:
            raise ValueError("need 0 < lr_min <= lr")
        if self.save_every < 0 or self.jitter < 0 or self.motion < 0 or self.grad_clip < 0:
            raise ValueError("save_every, jitter, motion and grad_clip must be non-negative")
        self.loss_config()  # validates the loss weights and window
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=WIDTHS[self.width], zoom=self.zoom,
                           simplified_fusion=self.simplified_fusion,
                           gate_activation=None if self.gate_activation == "none" else self.gate_activation,
                           num_blocks=self.num_blocks, init_confidence=self.init_confidence,
                           seed=self.seed)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_rec=self.lambda_rec, lambda_pre=self.lambda_pre,
                          lambda_8k=self.lambda_8k, window_k=self.window_k,
                          confidence_source=self.confidence_source)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, kind, text: str):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool,
                                                 "str": str}[kind]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ValueError(f"{name}: expected {kind.__name__}, got {text!r}") from None


def parse_pairs(lines, source: str = "<overrides>") -> dict:
    """``key=value`` lines (``#`` comments, blank lines allowed) -> typed dict."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ValueError(f"{source}:{no}: expected key=value, got {raw.strip()!r}")
        if key not in types:
            raise ValueError(f"{source}:{no}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValueError(f"config file {path} does not exist")
        values.update(parse_pairs(path.read_text().splitlines(), str(path)))
    values.update(parse_pairs(list(overrides)))
    return RunConfig(**values)
