"""Training/inference configuration with a sectioned key=value file format.

The file format covers every TrainConfig field; unknown sections or keys are
hard errors, missing keys fall back to the defaults below (the writer always
emits every field). The canonical text rendering doubles as the hash input
for checkpoint/config compatibility checks.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..ffrnet import CONTROL_FACTOR

FEATURE_MODES = ("id", "clip", "concat", "mixer")
CONTROL_MODES = ("none", "drive", "predictor")
MASK_NORMS = ("all", "area")


@dataclass(frozen=True)
class TrainConfig:
    # [model]
    width: int = 64                 # shared token width; also the denoiser context dim
    id_dim: int = 512
    clip_dim: int = 64
    id_tokens: int = 20
    clip_tokens: int = 257
    mix_tokens: int = 16
    heads: int = 1
    decoder_depth: int = 2
    latent_channels: int = 4
    latent_size: int = 16
    image_size: int = 64
    unet_channels: tuple = (32, 48, 64)
    norm_groups: int = 4
    shape_dim: int = 8
    expr_dim: int = 6
    basis_seed: int = 0

    # [diffusion]
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    schedule_ref_steps: int = 1000
    lightning_steps: int = 4
    sample_steps: int = 8
    guidance_scale: float = 2.0
    mask_norm: str = "all"

    # [train]
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 4
    steps: int = 200
    lambda_id: float = 0.5
    cfg_dropout_p: float = 0.1
    id_loss_every_n: int = 1
    seed: int = 0
    data_root: str = ""

    # [ablation]
    feature_mode: str = "mixer"
    use_ffrnet: bool = True
    control_mode: str = "predictor"
    base_id_attention: bool = False

    def __post_init__(self):
        positive = (
            "width", "id_dim", "clip_dim", "id_tokens", "clip_tokens", "mix_tokens",
            "heads", "decoder_depth", "latent_channels", "latent_size", "image_size",
            "norm_groups", "shape_dim", "expr_dim", "timesteps", "schedule_ref_steps",
            "lightning_steps", "sample_steps", "batch_size", "steps", "id_loss_every_n",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0 or self.lambda_id < 0 or self.guidance_scale < 0:
            raise ConfigError("weight_decay, lambda_id and guidance_scale must be >= 0")
        if not 0.0 <= self.cfg_dropout_p <= 1.0:
            raise ConfigError(f"cfg_dropout_p must be in [0, 1], got {self.cfg_dropout_p}")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ConfigError(f"betas must satisfy 0 < start < end < 1, got "
                              f"({self.beta_start}, {self.beta_end})")
        if self.width % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.image_size != CONTROL_FACTOR * self.latent_size:
            raise ConfigError(
                f"image_size must be {CONTROL_FACTOR}x latent_size, got "
                f"{self.image_size} vs {self.latent_size}")
        if len(self.unet_channels) < 1:
            raise ConfigError("unet_channels must name at least one resolution")
        for ch in self.unet_channels:
            if ch % self.norm_groups != 0:
                raise ConfigError(
                    f"norm_groups ({self.norm_groups}) must divide every unet channel "
                    f"count {self.unet_channels}")
        down_factor = 2 ** (len(self.unet_channels) - 1)
        if self.latent_size % down_factor != 0:
            raise ConfigError(
                f"latent_size ({self.latent_size}) must be divisible by {down_factor} "
                f"for {len(self.unet_channels)} resolutions")
        grid = math.isqrt(self.clip_tokens - 1)
        if grid * grid + 1 != self.clip_tokens:
            raise ConfigError(
                f"clip_tokens must be a perfect square plus one (patch grid + global "
                f"token), got {self.clip_tokens}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if self.control_mode not in CONTROL_MODES:
            raise ConfigError(f"control_mode must be one of {CONTROL_MODES}, got {self.control_mode!r}")
        if self.mask_norm not in MASK_NORMS:
            raise ConfigError(f"mask_norm must be one of {MASK_NORMS}, got {self.mask_norm!r}")

    @property
    def patch_grid(self) -> int:
        """Edge length of the detail-token patch grid (clip_tokens = grid^2 + 1)."""
        return math.isqrt(self.clip_tokens - 1)


_SECTIONS = {
    "model": (
        "width", "id_dim", "clip_dim", "id_tokens", "clip_tokens", "mix_tokens",
        "heads", "decoder_depth", "latent_channels", "latent_size", "image_size",
        "unet_channels", "norm_groups", "shape_dim", "expr_dim", "basis_seed",
    ),
    "diffusion": (
        "timesteps", "beta_start", "beta_end", "schedule_ref_steps",
        "lightning_steps", "sample_steps", "guidance_scale", "mask_norm",
    ),
    "train": (
        "lr", "weight_decay", "batch_size", "steps", "lambda_id",
        "cfg_dropout_p", "id_loss_every_n", "seed", "data_root",
    ),
    "ablation": ("feature_mode", "use_ffrnet", "control_mode", "base_id_attention"),
}

_FIELD_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}
_FIELD_TYPES["unet_channels"] = tuple


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


def config_to_text(config: TrainConfig) -> str:
    """Canonical file rendering: every field, fixed section and key order."""
    out = io.StringIO()
    for section, names in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for name in names:
            out.write(f"{name} = {_render_value(getattr(config, name))}\n")
        out.write("\n")
    return out.getvalue()


def config_from_text(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        known = set(_SECTIONS[section])
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            values[key] = _parse_value(key, raw)
    return TrainConfig(**values)


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode()).hexdigest()


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(config))


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return config_from_text(path.read_text())


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    unknown = set(overrides) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ConfigError(f"unknown config overrides: {sorted(unknown)}")
    return replace(config, **overrides)
