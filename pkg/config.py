# config.py
"""
Configuration file and CLI override handling.

File format: one ``section.key = value`` per line, ``#`` starts a comment,
blank lines are ignored. Values follow YAML scalar rules, lists use
brackets::

    # monoview.cfg
    data.root = /data/kitti
    data.patch_size = [256, 256]
    data.val_count = 35
    train.lr = 0.0001
    train.schedule = I-II-III
    loss.lambda8 = 0.035
    consistency.gamma = 0.07

Precedence: built-in defaults < config file < command-line overrides. The
MONOVIEW_DATA_ROOT environment variable fills ``data.root`` when neither
the file nor the command line sets it.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Mapping, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from consistency import DEFAULT_GAMMA
from datapipe import DatasetSpec, Split
from losses import LossWeights
from trainer import SCHEDULE_VARIANTS, Phase, TrainConfig

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "MONOVIEW_DATA_ROOT"


class ConfigError(ValueError):
    """Raised for malformed config files, unknown keys and ill-typed values."""


@dataclass
class DataSection:
    root: Optional[str] = None
    left_dir: str = "left"
    right_dir: str = "right"
    glob: str = "*.png"
    split: str = "train"
    patch_size: List[int] = field(default_factory=lambda: [256, 256])
    augment_fraction: float = 0.20
    val_count: int = 35
    seed: int = 0
    split_file: Optional[str] = None
    eval_crop: List[int] = field(default_factory=lambda: [256, 512])


@dataclass
class TrainSection:
    lr: float = 1e-4
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    batch_size: int = 16
    lr_patience: int = 10
    stop_patience: int = 20
    seed: int = 0
    max_epochs: Optional[int] = None
    max_steps: Optional[int] = None
    deterministic: bool = False
    workers: int = 0
    schedule: str = "I-II-III"
    encoder_weights: Optional[str] = None


@dataclass
class LossSection:
    lambda0: float = 0.80
    lambda1: float = 0.20
    lambda2: float = 0.85
    lambda3: float = 0.15
    lambda4: float = 0.25
    lambda5: float = 0.05
    lambda6: float = 0.50
    lambda7: float = 0.13
    lambda8: float = 0.035


@dataclass
class ConsistencySection:
    gamma: float = DEFAULT_GAMMA


@dataclass
class MonoviewConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    consistency: ConsistencySection = field(default_factory=ConsistencySection)


def parse_config_lines(text: str, source: str = "<config>") -> list[str]:
    """Turn ``key = value`` lines into an OmegaConf dotlist."""
    dotlist = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        dotlist.append(f"{key}={value}")
    return dotlist


def load_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    env: Optional[Mapping[str, str]] = None,
) -> MonoviewConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``key=value`` strings)."""
    env = os.environ if env is None else env
    schema = OmegaConf.structured(MonoviewConfig)
    layers = []
    try:
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"Config file not found: {path}")
            layers.append(OmegaConf.from_dotlist(parse_config_lines(path.read_text(encoding="utf-8"), str(path))))
        if overrides:
            layers.append(OmegaConf.from_dotlist(list(overrides)))
        merged = OmegaConf.merge(schema, *layers)
        if merged.data.root is None and env.get(DATA_ROOT_ENV):
            merged.data.root = env[DATA_ROOT_ENV]
        config = OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigError(f"Invalid configuration: {e}") from e

    validate(config)
    logger.debug("Configuration:\n%s", OmegaConf.to_yaml(OmegaConf.structured(config)))
    return config


def validate(config: MonoviewConfig) -> None:
    if config.train.schedule not in SCHEDULE_VARIANTS:
        raise ConfigError(f"train.schedule must be one of {', '.join(SCHEDULE_VARIANTS)}, got {config.train.schedule!r}")
    if config.data.split not in {s.value for s in Split}:
        raise ConfigError(f"data.split must be train, val or test, got {config.data.split!r}")
    for name in ("patch_size", "eval_crop"):
        if len(getattr(config.data, name)) != 2:
            raise ConfigError(f"data.{name} needs two values [height, width]")


def loss_weights(config: MonoviewConfig) -> LossWeights:
    try:
        return LossWeights(**{f.name: getattr(config.loss, f.name) for f in fields(LossSection)})
    except ValueError as e:
        raise ConfigError(str(e)) from e


def dataset_spec(config: MonoviewConfig, split: Optional[str] = None) -> DatasetSpec:
    data = config.data
    if data.root is None:
        raise ConfigError(f"No dataset root: set data.root, --data-root or {DATA_ROOT_ENV}")
    try:
        return DatasetSpec(
            root=Path(data.root),
            left_dir=data.left_dir,
            right_dir=data.right_dir,
            glob=data.glob,
            split=Split(split or data.split),
            patch_size=tuple(data.patch_size),
            augment_fraction=data.augment_fraction,
            val_count=data.val_count,
            seed=data.seed,
            split_file=Path(data.split_file) if data.split_file else None,
            eval_crop=tuple(data.eval_crop),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def train_config(config: MonoviewConfig, phase: Phase | str = Phase.I, progress: bool = False) -> TrainConfig:
    train = config.train
    try:
        return TrainConfig(
            phase=Phase.parse(phase),
            lr=train.lr,
            betas=tuple(train.betas),
            batch_size=train.batch_size,
            lr_patience=train.lr_patience,
            stop_patience=train.stop_patience,
            seed=train.seed,
            loss_weights=loss_weights(config),
            gamma=config.consistency.gamma,
            max_epochs=train.max_epochs,
            max_steps=train.max_steps,
            deterministic=train.deterministic,
            workers=train.workers,
            progress=progress,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def to_lines(config: MonoviewConfig) -> str:
    """Render ``config`` back into the ``key = value`` file format."""
    container = OmegaConf.to_container(OmegaConf.structured(config))
    lines = []
    for section, values in container.items():
        for key, value in values.items():
            lines.append(f"{section}.{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def save_config(config: MonoviewConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_lines(config), encoding="utf-8")
    return path
