# trainer.py
"""
Three-phase training schedule.

    Phase I    encoder + decoders, photometric loss on the DBP images
    Phase II   encoder + decoders, disparity-gradient loss
    Phase III  refiners + CBMs with the DBP frozen (or everything, end to end)

A checkpoint directory holds:

    model/           current weights (best weights once the phase completes)
    best/            best weights seen so far
    trainer_state/   Adam moments and step counters, shuffling RNG state
    meta.json        phase, epoch, step, validation history, lr, completed flag

Training log records (one JSON object per line, one per epoch):
    phase, epoch, step, lr, train_loss, val_metric, improved, terms
"""

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import torch
from tqdm import tqdm

import losses
import weightfile
from consistency import DEFAULT_GAMMA, ConsistencyParams, confidence_maps
from datapipe import DatasetIndex, Split, StereoBatch, batch_count, batches
from losses import LossWeights
from netdef import COMPONENT_GROUPS, COMPONENT_NAMES, ModelGraph, build_model
from warp import WarpDirection

logger = logging.getLogger(__name__)

MIN_DELTA = 1e-6
CHECKPOINT_VERSION = 1
MODEL_DIR = "model"
BEST_DIR = "best"
TRAINER_STATE_DIR = "trainer_state"
META_NAME = "meta.json"
LOG_NAME = "train_log.jsonl"
RNG_TENSOR = "rng"


class TrainingError(RuntimeError):
    """Raised for schedule violations and diverging training."""


class Phase(str, Enum):
    I = "I"
    II = "II"
    III = "III"

    @classmethod
    def parse(cls, value: "str | int | Phase") -> "Phase":
        if isinstance(value, cls):
            return value
        aliases = {"1": cls.I, "2": cls.II, "3": cls.III}
        key = str(value).strip().upper()
        return aliases.get(key) or cls(key)


@dataclass
class TrainConfig:
    phase: Phase = Phase.I
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    lr_patience: int = 10
    stop_patience: int = 20
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    gamma: float = DEFAULT_GAMMA
    max_epochs: Optional[int] = None
    max_steps: Optional[int] = None
    end_to_end: bool = False
    deterministic: bool = False
    workers: int = 0
    progress: bool = False

    def __post_init__(self):
        self.phase = Phase.parse(self.phase)
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValueError("lr_patience and stop_patience must be at least 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.workers < 0:
            raise ValueError(f"workers must be non-negative, got {self.workers}")
        ConsistencyParams(self.gamma)


@dataclass
class Checkpoint:
    phase: Phase
    phases_done: tuple[str, ...] = ()
    epoch: int = 0
    step: int = 0
    best_metric: float = math.inf
    history: list[float] = field(default_factory=list)
    lr: float = 0.0
    completed: bool = False
    path: Optional[Path] = None

    def to_meta(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "phase": self.phase.value,
            "phases_done": list(self.phases_done),
            "epoch": self.epoch,
            "step": self.step,
            "best_metric": None if math.isinf(self.best_metric) else self.best_metric,
            "history": self.history,
            "lr": self.lr,
            "completed": self.completed,
        }

    @classmethod
    def from_meta(cls, meta: dict, path: Optional[Path] = None) -> "Checkpoint":
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise TrainingError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        best = meta.get("best_metric")
        return cls(
            phase=Phase.parse(meta["phase"]),
            phases_done=tuple(meta.get("phases_done", ())),
            epoch=int(meta["epoch"]),
            step=int(meta["step"]),
            best_metric=math.inf if best is None else float(best),
            history=[float(v) for v in meta.get("history", [])],
            lr=float(meta["lr"]),
            completed=bool(meta["completed"]),
            path=path,
        )


@dataclass(frozen=True)
class PlateauDecision:
    lr: float
    stop: bool
    best: float
    epochs_since_best: int


def plateau_policy(history: Iterable[float], base_lr: float, lr_patience: int, stop_patience: int,
                   min_delta: float = MIN_DELTA) -> PlateauDecision:
    """Learning rate for the next epoch, and whether to stop, given the validation history.

    An epoch improves when it beats the best value so far by more than
    ``min_delta``. The rate halves after ``lr_patience`` epochs without
    improvement (the count restarts after each halving); training stops after
    ``stop_patience`` such epochs, checked before halving.
    """
    lr, best = base_lr, math.inf
    since_best = since_change = 0
    for value in history:
        if value < best - min_delta:
            best = value
            since_best = since_change = 0
        else:
            since_best += 1
            since_change += 1
        if since_best >= stop_patience:
            return PlateauDecision(lr=lr, stop=True, best=best, epochs_since_best=since_best)
        if since_change >= lr_patience:
            lr /= 2
            since_change = 0
    return PlateauDecision(lr=lr, stop=False, best=best, epochs_since_best=since_best)


def freeze(model: ModelGraph, names: Iterable[str]) -> list[str]:
    """Stop gradients into the named components (or groups); returns the resolved names."""
    resolved = model.resolve(names)
    for name in resolved:
        for param in getattr(model, name).parameters():
            param.requires_grad_(False)
            param.grad = None
    return resolved


def unfreeze(model: ModelGraph, names: Iterable[str]) -> list[str]:
    resolved = model.resolve(names)
    for name in resolved:
        for param in getattr(model, name).parameters():
            param.requires_grad_(True)
    return resolved


def trainable_components(cfg: TrainConfig) -> tuple[str, ...]:
    if cfg.phase is not Phase.III:
        return COMPONENT_GROUPS["dbp"]
    if cfg.end_to_end:
        return COMPONENT_NAMES
    return COMPONENT_GROUPS["refiners"] + COMPONENT_GROUPS["cbms"]


def set_trainable(model: ModelGraph, cfg: TrainConfig) -> tuple[str, ...]:
    names = trainable_components(cfg)
    freeze(model, COMPONENT_NAMES)
    unfreeze(model, names)
    return names


def build_optimizer(model: ModelGraph, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam over the currently trainable parameters only; frozen tensors get no state."""
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("No trainable parameters; every component is frozen")
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def phase3_bundles(model: ModelGraph, L: torch.Tensor, R: torch.Tensor, cfg: TrainConfig):
    """Both branches plus (C_LR, C_RL) from the current disparities, C carrying no gradient."""
    if cfg.end_to_end:
        d_lr = model.disparity(L, WarpDirection.LEFT_TO_RIGHT)
        d_rl = model.disparity(R, WarpDirection.RIGHT_TO_LEFT)
    else:
        with torch.no_grad():
            d_lr = model.disparity(L, WarpDirection.LEFT_TO_RIGHT)
            d_rl = model.disparity(R, WarpDirection.RIGHT_TO_LEFT)
    with torch.no_grad():
        c_lr, c_rl = confidence_maps(d_lr.detach(), d_rl.detach(), ConsistencyParams(cfg.gamma))
    left = model.branch_from_disparity(R, d_rl, WarpDirection.RIGHT_TO_LEFT).with_confidence(c_rl)
    right = model.branch_from_disparity(L, d_lr, WarpDirection.LEFT_TO_RIGHT).with_confidence(c_lr)
    return (left, right), c_lr, c_rl


def phase_terms(model: ModelGraph, batch: StereoBatch, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    L, R, w = batch.left, batch.right, cfg.loss_weights
    if cfg.phase is Phase.III:
        bundles, c_lr, c_rl = phase3_bundles(model, L, R, cfg)
        return losses.phase3_terms(L, R, bundles, c_lr, c_rl, w)
    out = model.dbp(L, R)
    if cfg.phase is Phase.I:
        return losses.phase1_terms(L, R, out.left_dbp, out.right_dbp, w)
    return losses.phase2_terms(L, R, out.left_dbp, out.right_dbp, out.d_lr, out.d_rl, w)


def evaluate_split(model: ModelGraph, data: DatasetIndex, cfg: TrainConfig, split: Split | str = Split.VAL) -> float:
    """Mean phase loss over one split, center-cropped to ``data.spec.eval_crop``."""
    split = Split(split)
    entries = data.entries(split)
    if not entries:
        raise TrainingError(f"No {split.value} pairs to evaluate")
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for batch in batches(entries, cfg.batch_size, train=False, crop_size=data.spec.eval_crop,
                             workers=0 if cfg.deterministic else cfg.workers):
            loss = sum(phase_terms(model, batch, cfg).values())
            total += loss.item() * len(batch)
            count += len(batch)
    return total / count


def validate(model: ModelGraph, data: DatasetIndex, cfg: TrainConfig) -> float:
    return evaluate_split(model, data, cfg, Split.VAL)


class TrainingLog:
    """Line-delimited JSON records, kept in memory and appended to ``path`` if given."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


def _snapshot(model: ModelGraph) -> dict[str, torch.Tensor]:
    return {name: t.detach().clone() for name, t in model.state_dict().items()}


def save_checkpoint(directory: Path, model: ModelGraph, checkpoint: Checkpoint,
                    best_state: Optional[dict[str, torch.Tensor]] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    generator: Optional[torch.Generator] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weightfile.save_tensors(model.state_dict(), directory / MODEL_DIR)
    if best_state is not None:
        weightfile.save_tensors(best_state, directory / BEST_DIR)

    state = {}
    if optimizer is not None:
        for index, entries in optimizer.state_dict()["state"].items():
            for key, value in entries.items():
                state[f"adam.{index}.{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    if generator is not None:
        state[RNG_TENSOR] = generator.get_state()
    if state:
        weightfile.save_tensors(state, directory / TRAINER_STATE_DIR)

    with open(directory / META_NAME, "w", encoding="utf-8") as f:
        json.dump(checkpoint.to_meta(), f, indent=2)
    checkpoint.path = directory
    logger.debug("Saved checkpoint (phase %s, epoch %d) to %s", checkpoint.phase.value, checkpoint.epoch, directory)
    return directory


def load_checkpoint(directory: Path, model: Optional[ModelGraph] = None) -> Checkpoint:
    """Read ``meta.json``; with ``model`` given, also load the saved weights into it."""
    directory = Path(directory)
    meta_path = directory / META_NAME
    if not meta_path.is_file():
        raise TrainingError(f"No checkpoint at {directory} (missing {META_NAME})")
    with open(meta_path, "r", encoding="utf-8") as f:
        checkpoint = Checkpoint.from_meta(json.load(f), directory)
    if model is not None:
        weightfile.load_into(model, directory / MODEL_DIR)
    return checkpoint


def load_trainer_state(directory: Path, optimizer: torch.optim.Optimizer, generator: torch.Generator) -> None:
    tensors = weightfile.load_tensors(Path(directory) / TRAINER_STATE_DIR)
    if RNG_TENSOR in tensors:
        generator.set_state(tensors.pop(RNG_TENSOR))
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, tensor in tensors.items():
        _, index, key = name.split(".")
        state.setdefault(int(index), {})[key] = tensor
    saved = optimizer.state_dict()
    saved["state"] = state
    optimizer.load_state_dict(saved)


def find_checkpoint_dir(path: Path) -> Optional[Path]:
    """``path`` itself if it is a checkpoint, else the latest completed phase under it."""
    path = Path(path)
    if (path / META_NAME).is_file():
        return path
    for phase in reversed(list(Phase)):
        candidate = path / phase_dir_name(phase)
        if (candidate / META_NAME).is_file() and load_checkpoint(candidate).completed:
            return candidate
    return None


def find_model_dir(path: Path) -> Path:
    """Weights directory for a bare weight file, a checkpoint, or a schedule output."""
    path = Path(path)
    if (path / weightfile.MANIFEST_NAME).is_file():
        return path
    checkpoint_dir = find_checkpoint_dir(path)
    if checkpoint_dir is not None and (checkpoint_dir / MODEL_DIR / weightfile.MANIFEST_NAME).is_file():
        return checkpoint_dir / MODEL_DIR
    raise weightfile.WeightFileError(f"No model weights found under {path}")


def load_model(path: Path, seed: int = 0) -> ModelGraph:
    model = build_model(seed)
    weightfile.load_into(model, find_model_dir(path))
    model.eval()
    return model


def phase_dir_name(phase: Phase) -> str:
    return f"phase_{phase.value}"


def check_prerequisites(cfg: TrainConfig, previous: Optional[Checkpoint]) -> tuple[str, ...]:
    done = tuple(previous.phases_done) if previous is not None else ()
    if cfg.phase is Phase.II and Phase.I.value not in done:
        raise TrainingError("Phase II needs a completed Phase I checkpoint")
    if cfg.phase is Phase.III and not cfg.end_to_end and not {Phase.I.value, Phase.II.value} & set(done):
        raise TrainingError("Phase III needs a completed Phase I or Phase II checkpoint (or end_to_end=True)")
    return done


def _run_epoch(model, data, cfg, optimizer, generator, checkpoint) -> tuple[float, dict[str, float]]:
    model.train()
    n_batches = batch_count(len(data.train), cfg.batch_size, train=True)
    total, sums, seen = 0.0, {}, 0
    stream = batches(data.train, cfg.batch_size, generator, train=True, spec=data.spec,
                     workers=0 if cfg.deterministic else cfg.workers)
    for batch in tqdm(stream, total=n_batches, desc=f"Phase {cfg.phase.value} epoch {checkpoint.epoch + 1}",
                      disable=not cfg.progress, leave=False):
        terms = phase_terms(model, batch, cfg)
        loss = sum(terms.values())
        if not torch.isfinite(loss):
            detail = ", ".join(f"{k}={v.item():.4g}" for k, v in terms.items())
            raise TrainingError(
                f"Non-finite loss in phase {cfg.phase.value}, epoch {checkpoint.epoch + 1}, "
                f"step {checkpoint.step + 1} ({detail})"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        checkpoint.step += 1
        seen += 1
        total += loss.item()
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v.item()
        if cfg.max_steps is not None and checkpoint.step >= cfg.max_steps:
            break
    return total / seen, {k: v / seen for k, v in sums.items()}


def train_phase(
    model: ModelGraph,
    data: DatasetIndex,
    cfg: TrainConfig,
    previous: Optional[Checkpoint] = None,
    checkpoint_dir: Optional[Path] = None,
    log: Optional[TrainingLog] = None,
) -> Checkpoint:
    """Train one phase to its stopping point and leave the best weights in ``model``.

    With ``checkpoint_dir`` set, a finished phase found there is loaded and
    skipped, and an unfinished one is resumed from its last epoch.
    """
    done = check_prerequisites(cfg, previous)
    if len(data.train) < cfg.batch_size:
        raise TrainingError(f"{len(data.train)} training pairs cannot fill a batch of {cfg.batch_size}")
    log = log or TrainingLog()
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    names = set_trainable(model, cfg)
    optimizer = build_optimizer(model, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    checkpoint = Checkpoint(phase=cfg.phase, phases_done=done, lr=cfg.lr)
    best_state = None

    if checkpoint_dir is not None and (checkpoint_dir / META_NAME).is_file():
        existing = load_checkpoint(checkpoint_dir)
        if existing.phase is not cfg.phase:
            raise TrainingError(f"{checkpoint_dir} holds phase {existing.phase.value}, not {cfg.phase.value}")
        weightfile.load_into(model, checkpoint_dir / MODEL_DIR)
        if existing.completed:
            logger.info("Phase %s already complete in %s", cfg.phase.value, checkpoint_dir)
            return existing
        checkpoint = existing
        if (checkpoint_dir / BEST_DIR).is_dir():
            best_state = weightfile.load_tensors(checkpoint_dir / BEST_DIR)
        load_trainer_state(checkpoint_dir, optimizer, generator)
        logger.info("Resuming phase %s at epoch %d", cfg.phase.value, checkpoint.epoch + 1)

    logger.info("Phase %s: training %s", cfg.phase.value, ", ".join(names))
    with deterministic_mode(cfg.deterministic):
        while True:
            decision = plateau_policy(checkpoint.history, cfg.lr, cfg.lr_patience, cfg.stop_patience)
            if decision.stop:
                logger.info("Phase %s: no improvement for %d epochs, stopping",
                            cfg.phase.value, decision.epochs_since_best)
                break
            if cfg.max_epochs is not None and checkpoint.epoch >= cfg.max_epochs:
                break
            if cfg.max_steps is not None and checkpoint.step >= cfg.max_steps:
                break

            for group in optimizer.param_groups:
                group["lr"] = decision.lr
            train_loss, terms = _run_epoch(model, data, cfg, optimizer, generator, checkpoint)
            metric = validate(model, data, cfg) if data.val else train_loss
            improved = metric < checkpoint.best_metric - MIN_DELTA

            checkpoint.epoch += 1
            checkpoint.history.append(metric)
            checkpoint.lr = decision.lr
            if improved:
                checkpoint.best_metric = metric
                best_state = _snapshot(model)
            log.write({
                "phase": cfg.phase.value,
                "epoch": checkpoint.epoch,
                "step": checkpoint.step,
                "lr": decision.lr,
                "train_loss": train_loss,
                "val_metric": metric,
                "improved": improved,
                "terms": terms,
            })
            logger.info("Phase %s epoch %d: train %.5f, val %.5f, lr %.2e%s", cfg.phase.value, checkpoint.epoch,
                        train_loss, metric, decision.lr, " (best)" if improved else "")
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, model, checkpoint, best_state, optimizer, generator)

    if best_state is not None:
        model.load_state_dict(best_state)
    checkpoint.completed = True
    checkpoint.phases_done = done + (cfg.phase.value,)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, checkpoint, best_state, optimizer, generator)
    logger.info("Phase %s done after %d epochs, best metric %.5f", cfg.phase.value, checkpoint.epoch, checkpoint.best_metric)
    return checkpoint


SCHEDULE_VARIANTS = {
    "I": (Phase.I,),
    "I-II": (Phase.I, Phase.II),
    "I-II-III": (Phase.I, Phase.II, Phase.III),
    "I-III": (Phase.I, Phase.III),
    "III": (Phase.III,),
    "no-confidence": (Phase.I, Phase.II, Phase.III),
}


def build_schedule(variant: str, base: TrainConfig) -> tuple[Optional[TrainConfig], ...]:
    """Per-phase configs (None for skipped phases) for a named schedule variant."""
    if variant not in SCHEDULE_VARIANTS:
        raise TrainingError(f"Unknown schedule {variant!r}; choose from {', '.join(SCHEDULE_VARIANTS)}")
    phases = SCHEDULE_VARIANTS[variant]
    configs = []
    for phase in Phase:
        if phase not in phases:
            configs.append(None)
            continue
        cfg = replace(base, phase=phase, end_to_end=variant == "III")
        if variant == "no-confidence" and phase is Phase.III:
            cfg = replace(cfg, loss_weights=replace(cfg.loss_weights, lambda8=0.0))
        configs.append(cfg)
    return tuple(configs)


def run_schedule(
    model: ModelGraph,
    data: DatasetIndex,
    cfg_I: Optional[TrainConfig],
    cfg_II: Optional[TrainConfig],
    cfg_III: Optional[TrainConfig],
    out_dir: Path,
    previous: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Run the given phases in order, one checkpoint directory per phase under ``out_dir``.

    ``previous`` carries phases completed elsewhere (its weights must already
    be in ``model``), so a later phase can start from an earlier run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = TrainingLog(out_dir / LOG_NAME)
    ran = False
    for cfg in (cfg_I, cfg_II, cfg_III):
        if cfg is None:
            continue
        logger.info("Phase %s → %s", cfg.phase.value, out_dir / phase_dir_name(cfg.phase))
        previous = train_phase(model, data, cfg, previous=previous,
                               checkpoint_dir=out_dir / phase_dir_name(cfg.phase), log=log)
        ran = True
    if not ran:
        raise TrainingError("Schedule has no phases to run")
    with open(out_dir / "schedule.json", "w", encoding="utf-8") as f:
        json.dump({
            "phases_done": list(previous.phases_done),
            "final": phase_dir_name(previous.phase),
            "configs": [_describe(cfg) for cfg in (cfg_I, cfg_II, cfg_III) if cfg is not None],
        }, f, indent=2)
    return previous


def _describe(cfg: TrainConfig) -> dict:
    described = asdict(cfg)
    described["phase"] = cfg.phase.value
    described["betas"] = list(cfg.betas)
    return described
