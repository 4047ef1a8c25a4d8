"""
Run configuration.

Every tunable lives under a flat dotted key (``rl.k_reward``,
``schedule.T``...). A config file is UTF-8 text with one ``key = value``
per line; ``#`` starts a comment. Values are coerced to the declared type
of the field they set.

Precedence, lowest first: defaults, config file, ``--set key=value``,
dedicated command-line flags.
"""

from __future__ import annotations

import re
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, SampleConfig, make_linear_schedule
from .errors import ConfigError, CouplerError
from .mec import RLConfig


# =============================================================================
# SECTIONS
# =============================================================================

@dataclass
class ModelSettings:
    """Denoiser shape; data and condition dimensions come from the data."""
    hidden_dims: list[int] = field(default_factory=lambda: [128, 128, 128])
    time_embed_dim: int = 32
    cond_drop_prob: float = 0.1

    def __post_init__(self):
        # Validate through the real config with a placeholder data dimension.
        DenoiserConfig(1, None, self.hidden_dims, self.time_embed_dim, self.cond_drop_prob)

    def denoiser(self, data_dim: int, cond_dim: int | None = None) -> DenoiserConfig:
        return DenoiserConfig(data_dim, cond_dim, list(self.hidden_dims), self.time_embed_dim, self.cond_drop_prob)


@dataclass
class ScheduleSettings:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def __post_init__(self):
        make_linear_schedule(self.T, self.beta_min, self.beta_max)

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_min, self.beta_max)


@dataclass
class TrainSettings:
    """Unconditional pretraining."""
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 5000
    grad_clip: float = 1.0
    ema_decay: float = 0.999

    def __post_init__(self):
        if not self.lr > 0 or self.batch_size < 1 or self.steps < 0 or not self.grad_clip > 0:
            raise ConfigError("train: need lr > 0, batch_size >= 1, steps >= 0, grad_clip > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"train.ema_decay must lie in [0, 1), got {self.ema_decay}")


@dataclass
class DataSettings:
    normalize: bool = True
    clip_sigmas: float = 5.0
    test_fraction: float = 0.1

    def __post_init__(self):
        if not self.clip_sigmas > 0:
            raise ConfigError(f"data.clip_sigmas must be > 0, got {self.clip_sigmas}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"data.test_fraction must lie in [0, 1), got {self.test_fraction}")


SECTIONS: dict[str, type] = {
    "model": ModelSettings,
    "schedule": ScheduleSettings,
    "sample": SampleConfig,
    "train": TrainSettings,
    "rl": RLConfig,
    "data": DataSettings,
}


@dataclass
class RunConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    sample: SampleConfig = field(default_factory=SampleConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    rl: RLConfig = field(default_factory=RLConfig)
    data: DataSettings = field(default_factory=DataSettings)
    seed: int = 0

    def items(self) -> list[tuple[str, object]]:
        """Every key with its current value, in declaration order."""
        out: list[tuple[str, object]] = []
        for section in SECTIONS:
            values = getattr(self, section)
            out.extend((f"{section}.{f.name}", getattr(values, f.name)) for f in fields(values))
        out.append(("seed", self.seed))
        return out

    def set(self, key: str, raw: str, where: str = "") -> None:
        """
        Set one key from its text form.

        Raises:
            ConfigError: Unknown key, uncoercible value, or a value the
                section rejects.
        """
        prefix = f"{where}: " if where else ""
        if key == "seed":
            self.seed = _coerce(raw, int, key, prefix)
            return
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{prefix}unknown config key '{key}'")
        current = getattr(self, section)
        hints = typing.get_type_hints(type(current))
        if name not in {f.name for f in fields(current)}:
            raise ConfigError(f"{prefix}unknown config key '{key}'")
        value = _coerce(raw, hints[name], key, prefix)
        try:
            setattr(self, section, replace(current, **{name: value}))
        except CouplerError as e:
            raise ConfigError(f"{prefix}{key}: {e}") from None


# =============================================================================
# PARSING
# =============================================================================

LINE_PATTERN = re.compile(r'^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$')
TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


def _coerce(raw: str, kind, key: str, prefix: str = ""):
    """Turn text into a value of the annotated type."""
    origin = typing.get_origin(kind)
    if origin in (typing.Union, types.UnionType):
        if raw.strip().lower() in ("", "none", "null"):
            return None
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
        origin = typing.get_origin(kind)
    text = raw.strip()
    try:
        if origin is list:
            (item,) = typing.get_args(kind)
            return [item(part.strip()) for part in text.split(",") if part.strip()]
        if kind is bool:
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return kind(text)
    except ValueError:
        name = getattr(kind, "__name__", str(kind))
        raise ConfigError(f"{prefix}{key}: cannot read {raw!r} as {name}") from None


def parse_config_text(text: str, config: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Apply 'key = value' lines to a config (a fresh default one if not given)."""
    config = config or RunConfig()
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0]
        if not content.strip():
            continue
        match = LINE_PATTERN.match(content)
        if not match:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line.strip()!r}")
        config.set(match.group(1), match.group(2), where=f"{source}:{number}")
    return config


def load_config(path: Path | str | None, config: RunConfig | None = None) -> RunConfig:
    config = config or RunConfig()
    if path is None:
        return config
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, config, source=str(path))


def apply_overrides(config: RunConfig, overrides: list[str] | None) -> RunConfig:
    """Apply '--set key=value' strings."""
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        config.set(key.strip(), value, where="--set")
    return config


def _format(value) -> str:
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def describe_keys(config: RunConfig | None = None) -> str:
    """One 'key = default' line per setting, for --help."""
    config = config or RunConfig()
    return "\n".join(f"  {key} = {_format(value)}" for key, value in config.items())
