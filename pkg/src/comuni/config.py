"""Run configuration: typed fields, key=value file format, validation, hashing.

The on-disk format is deliberately plain: one ``key=value`` per line, ``#``
comments allowed, lists comma-separated.  Every consumer of a config-derived
artifact (checkpoints, sampling manifests, metric reports) embeds the config
hash so mismatched artifacts are detected instead of silently combined.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

PE_TARGETS = ("none", "qk", "kv")


@dataclass(frozen=True)
class RunConfig:
    # geometry
    resolution: int = 64            # H = W of input frames
    frames: int = 16                # T, clip length
    f_c: int = 4                    # commonness downsample factor
    f_u: int = 16                   # uniqueness downsample factor
    latent_dim: int = 3             # D, channels of both latent kinds

    # diffusion schedule
    steps: int = 1000               # S
    beta_start: float = 0.00085
    beta_end: float = 0.0012

    # denoiser architecture
    block_factor: int = 2           # w, spatial blocks per axis in joint attention
    model_dim: int = 224
    channel_multiplies: tuple[int, ...] = (1, 1, 3, 4)
    attention_resolutions: tuple[int, ...] = (16, 8, 4)
    num_res_blocks: int = 1
    pe_target: str = "kv"           # none | qk | kv
    joint_modules_enabled: bool = True

    # VAE architecture
    vae_hidden: int = 64
    vae_res_layers: int = 2
    disc_hidden: int = 32

    # losses / optimization
    kl_weight: float = 1e-6
    adv_weight: float = 0.1
    perceptual_weight: float = 1.0
    adv_warmup_iters: int = 2000
    lr_vae: float = 1e-3
    lr_ldm: float = 2e-4
    batch_size: int = 2
    grad_clip: float = 1.0
    ema_interval: int = 100
    ema_decay: float = 0.999

    # seeds
    seed: int = 0
    data_seed: int = 0

    def __post_init__(self):
        validate(self)

    # -- derived geometry -------------------------------------------------

    @property
    def common_res(self) -> int:
        return self.resolution // self.f_c

    @property
    def unique_res(self) -> int:
        return self.resolution // self.f_u

    def common_latent_shape(self) -> tuple[int, int, int]:
        return (self.common_res, self.common_res, self.latent_dim)

    def unique_latent_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.unique_res, self.unique_res, self.latent_dim)

    @property
    def extra_down_stages(self) -> int:
        """How many more down/up stages the commonness stream has."""
        return (self.f_u // self.f_c).bit_length() - 1

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def config_hash(self) -> str:
        text = serialize(self)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def validate(cfg: RunConfig) -> None:
    """Raise ConfigError on the first violated invariant."""
    if cfg.frames < 1:
        raise ConfigError(f"frames must be >= 1, got {cfg.frames}")
    if cfg.latent_dim < 1:
        raise ConfigError(f"latent_dim must be >= 1, got {cfg.latent_dim}")
    if not (cfg.f_c >= 1 and cfg.f_u >= 1):
        raise ConfigError("downsample factors must be positive")
    if not cfg.f_c < cfg.f_u:
        raise ConfigError(f"f_c must be < f_u, got f_c={cfg.f_c} f_u={cfg.f_u}")
    ratio, rem = divmod(cfg.f_u, cfg.f_c)
    if rem != 0 or not _is_power_of_two(ratio) or ratio < 2:
        raise ConfigError(f"f_u/f_c must be a power of 2 >= 2, got {cfg.f_u}/{cfg.f_c}")
    if not (_is_power_of_two(cfg.f_c) and _is_power_of_two(cfg.f_u)):
        raise ConfigError("f_c and f_u must be powers of 2")
    if cfg.resolution % (cfg.f_u * cfg.block_factor) != 0:
        raise ConfigError(
            f"resolution {cfg.resolution} must be divisible by "
            f"f_u*w = {cfg.f_u * cfg.block_factor}"
        )
    if cfg.steps < 1:
        raise ConfigError(f"steps must be >= 1, got {cfg.steps}")
    if not (0.0 < cfg.beta_start < 1.0 and 0.0 < cfg.beta_end < 1.0):
        raise ConfigError("beta endpoints must lie in (0, 1)")
    if not cfg.beta_start < cfg.beta_end:
        raise ConfigError(
            f"beta_start must be < beta_end, got {cfg.beta_start} >= {cfg.beta_end}"
        )
    if cfg.block_factor < 1:
        raise ConfigError("block_factor must be >= 1")
    if cfg.pe_target not in PE_TARGETS:
        raise ConfigError(f"pe_target must be one of {PE_TARGETS}, got {cfg.pe_target!r}")
    if len(cfg.channel_multiplies) <= cfg.extra_down_stages:
        raise ConfigError(
            "channel_multiplies must provide more levels than the extra "
            f"commonness down stages ({cfg.extra_down_stages}); "
            f"got {len(cfg.channel_multiplies)} levels"
        )
    if cfg.model_dim < 1 or cfg.vae_hidden < 1:
        raise ConfigError("model dims must be positive")
    if cfg.num_res_blocks < 1:
        raise ConfigError("num_res_blocks must be >= 1")
    # the deepest shared level must still be block-divisible
    shared_levels = len(cfg.channel_multiplies) - cfg.extra_down_stages
    deepest = cfg.unique_res >> (shared_levels - 1)
    if deepest < 1 or deepest % cfg.block_factor != 0:
        raise ConfigError(
            f"deepest shared resolution {deepest} is not divisible by "
            f"block_factor {cfg.block_factor}; reduce channel_multiplies depth"
        )


# -- flat key=value serialization -----------------------------------------

_LIST_FIELDS = {"channel_multiplies", "attention_resolutions"}


def _format_value(name: str, value) -> str:
    if name in _LIST_FIELDS:
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(name: str, text: str, target_type):
    text = text.strip()
    if name in _LIST_FIELDS:
        return tuple(int(part) for part in text.split(",") if part)
    if target_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean {name}={text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    return text


def serialize(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"{f.name}={_format_value(f.name, getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def parse_config(text: str) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, val, types[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return RunConfig(**values)


# -- presets ---------------------------------------------------------------

def desk_config(**overrides) -> RunConfig:
    """Default desk-scale config: 64x64, 16 frames, full-size schedule."""
    return RunConfig(**overrides)


def paper_config(**overrides) -> RunConfig:
    """Published hyperparameters at 128x128 (model_dim 224, VAE hidden 256)."""
    base = dict(
        resolution=128,
        model_dim=224,
        vae_hidden=256,
        vae_res_layers=4,
        disc_hidden=32,
        ema_decay=0.9999,
    )
    base.update(overrides)
    return RunConfig(**base)
