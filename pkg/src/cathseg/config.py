"""Run configuration read from flat ``key = value`` text files.

Blank lines and ``#`` comments are ignored.  Tuple-valued keys take
comma-separated integers (``widths = 8,16,32,64``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig

TARGETS = ("aorta", "catheter")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    target: str = "catheter"
    seed: int = 0
    # data
    data: str = "data"
    n_train: int = 16
    n_val: int = 4
    frames: int = 8
    image_size: int = 64
    # model
    widths: tuple = (8, 16, 32, 64)
    decoder_widths: tuple = (8, 16, 16, 32)
    out_width: int = 8
    heads: int = 4
    inner_dim: int = 64
    ffn_mult: int = 2
    head_mode: str = "sequential"
    # optimisation
    w_dice: float = 5.0
    w_bce: float = 2.0
    w_mse: float = 2.0
    lr: float = 3e-3
    epochs: int = 100
    max_steps: int = 2000
    checkpoint_every: int = 10
    augment: bool = False
    # temporal references
    short_term_gap: int = 2
    train_memory: int = 1
    memory_capacity: int = 3
    memory_threshold: float = 0.7
    checkpoint: str = "checkpoint"

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.image_size % 16:
            raise ConfigError(f"image_size {self.image_size} is not divisible by 16")
        if self.widths[-1] % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide {self.widths[-1]} channels")
        if len(self.widths) != 4 or len(self.decoder_widths) != 4:
            raise ConfigError("widths and decoder_widths need four entries")
        if min(self.w_dice, self.w_bce, self.w_mse) <= 0:
            raise ConfigError("loss weights must be positive")
        if self.lr <= 0 or self.epochs < 0 or self.max_steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("lr must be positive, epochs/max_steps non-negative, checkpoint_every >= 1")
        if self.short_term_gap < 1 or self.train_memory < 0 or self.memory_capacity < 1:
            raise ConfigError("short_term_gap and memory_capacity must be >= 1")
        if not 0.0 <= self.memory_threshold <= 1.0:
            raise ConfigError(f"memory_threshold {self.memory_threshold} outside [0, 1]")
        if self.frames < 1 or self.n_train < 0 or self.n_val < 0:
            raise ConfigError("frames must be >= 1 and sequence counts non-negative")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.image_size, tuple(self.widths), tuple(self.decoder_widths), self.out_width,
                           self.heads, self.inner_dim, self.ffn_mult, self.head_mode)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.w_dice, self.w_bce, self.w_mse)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"], d["decoder_widths"] = list(self.widths), list(self.decoder_widths)
        return d

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror or exc}") from exc
    return parse_config(text, str(p))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    return "\n".join(lines) + "\n"
