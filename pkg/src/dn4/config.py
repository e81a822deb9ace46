"""Flat key = value run configuration.

One namespace covers every pipeline stage; a config file sets only the keys
it cares about and `--set key=value` overrides beat the file. Unknown keys
are rejected outright so typos cannot silently fall back to defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError

__all__ = [
    "RunConfig",
    "load_config",
    "render_config",
    "parse_int_list",
    "emb_config",
    "measure_config",
    "train_config",
    "pretrain_config",
    "augment_config",
]


@dataclass
class RunConfig:
    # input artifacts
    manifest: str = ""
    split: str = ""
    checkpoint: str = ""
    checkpoint_dn4: str = ""
    checkpoint_ioi1: str = ""
    checkpoint_ioi2: str = ""
    checkpoint_pattern: str = ""

    # embedding
    filters: int = 64
    in_channels: int = 3
    image_size: int = 84
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    head_hidden1: int = 512
    head_hidden2: int = 256
    batchnorm_mode: str = "batch"

    # measure
    k_neighbors: int = 3
    zero_norm_eps: float = 1e-8
    measure_variant: str = "dn4"

    # episodic training
    way: int = 5
    shot: int = 1
    queries_per_class: int = 15
    episodes_total: int = 30_000
    learning_rate: float = 1e-3
    lr_halve_every: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_every: int = 500
    val_episodes: int = 100
    score_scale: float = 1.0
    augment_enabled: bool = False
    crop_padding: int = 8
    flip_probability: float = 0.5

    # classifier pretraining
    pretrain_epochs: int = 30
    pretrain_batch_size: int = 32
    pretrain_learning_rate: float = 1e-3

    # evaluation
    eval_episodes: int = 600
    eval_repeats: int = 5
    eval_section: str = "test"
    knn_k: int = 3

    # synthetic data and splits
    num_classes: int = 45
    images_per_class: int = 30
    train_classes: int = 30
    val_classes: int = 5
    test_classes: int = 10

    # studies
    k_values: str = "1,3,5,7"
    train_shots: str = "1,2,3,4,5"
    test_shots: str = "1,2,3,4,5"

    seed: int = 0


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {exc}") from exc


def _parse_lines(text: str, source: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the file, then --set overrides, then an explicit seed."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        raw.update(_parse_lines(p.read_text(encoding="utf-8"), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    cfg = RunConfig()
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key: {key}")
        setattr(cfg, key, _parse_value(key, value))
    if seed is not None:
        cfg.seed = seed
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Canonical echo of a fully resolved config, one sorted key per line."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def parse_int_list(raw: str, key: str) -> list[int]:
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad integer list for {key}: {raw!r}") from exc
    if not values:
        raise ConfigurationError(f"empty integer list for {key}")
    return values


# Bridges into the per-module config dataclasses. Imports stay local so that
# merely loading a config file never drags numpy in.

def emb_config(cfg: RunConfig):
    from .embedding import EmbeddingConfig

    return EmbeddingConfig(
        filters=cfg.filters,
        in_channels=cfg.in_channels,
        height=cfg.image_size,
        width=cfg.image_size,
        leaky_slope=cfg.leaky_slope,
        bn_eps=cfg.bn_eps,
        head_hidden=(cfg.head_hidden1, cfg.head_hidden2),
    )


def measure_config(cfg: RunConfig):
    from .measure import MeasureConfig

    return MeasureConfig(k_neighbors=cfg.k_neighbors, zero_norm_eps=cfg.zero_norm_eps)


def augment_config(cfg: RunConfig):
    from .data import AugmentConfig

    return AugmentConfig(
        enabled=cfg.augment_enabled,
        crop_padding=cfg.crop_padding,
        flip_probability=cfg.flip_probability,
    )


def train_config(cfg: RunConfig):
    from .trainer import TrainConfig

    return TrainConfig(
        way=cfg.way,
        shot=cfg.shot,
        queries_per_class=cfg.queries_per_class,
        episodes_total=cfg.episodes_total,
        learning_rate=cfg.learning_rate,
        lr_halve_every=cfg.lr_halve_every,
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps,
        k_neighbors=cfg.k_neighbors,
        seed=cfg.seed,
        augment=augment_config(cfg),
        val_every=cfg.val_every,
        val_episodes=cfg.val_episodes,
        measure_variant=cfg.measure_variant,
        score_scale=cfg.score_scale,
    )


def pretrain_config(cfg: RunConfig):
    from .trainer import PretrainConfig

    return PretrainConfig(
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.pretrain_batch_size,
        learning_rate=cfg.pretrain_learning_rate,
        seed=cfg.seed,
    )
