# datapipe.py
"""
Stereo pair ingestion for training and evaluation.

Layout on disk:

    <root>/<left_dir>/<name>.png
    <root>/<right_dir>/<name>.png

Left and right files are paired by filename stem; the stem is the pair's
source_id. Images are 8-bit RGB and are normalized to [-1, 1] on load.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, Dataset, default_collate

import image_io
from netdef import INPUT_DIVISOR

logger = logging.getLogger(__name__)

AUGMENT_RANGE = (0.8, 1.2)


class DatasetError(ValueError):
    """Raised for missing, unpaired or unreadable dataset files."""


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class DatasetSpec:
    root: Path
    left_dir: str = "left"
    right_dir: str = "right"
    glob: str = "*.png"
    split: Split = Split.TRAIN
    patch_size: tuple[int, int] = (256, 256)
    augment_fraction: float = 0.20
    val_count: int = 35
    seed: int = 0
    split_file: Optional[Path] = None
    eval_crop: tuple[int, int] = (256, 512)

    def __post_init__(self):
        self.root = Path(self.root)
        self.split = Split(self.split)
        self.patch_size = tuple(self.patch_size)
        self.eval_crop = tuple(self.eval_crop)
        if self.split_file is not None:
            self.split_file = Path(self.split_file)
        for name in ("patch_size", "eval_crop"):
            h, w = getattr(self, name)
            if h <= 0 or w <= 0 or h % INPUT_DIVISOR or w % INPUT_DIVISOR:
                raise DatasetError(f"{name} {h}×{w} must be positive multiples of {INPUT_DIVISOR}")
        if not 0.0 <= self.augment_fraction <= 1.0:
            raise DatasetError(f"augment_fraction must lie in [0, 1], got {self.augment_fraction}")
        if self.val_count < 0:
            raise DatasetError(f"val_count must be non-negative, got {self.val_count}")


@dataclass(frozen=True)
class PairEntry:
    source_id: str
    left_path: Path
    right_path: Path


@dataclass
class DatasetIndex:
    spec: DatasetSpec
    train: list[PairEntry] = field(default_factory=list)
    val: list[PairEntry] = field(default_factory=list)
    test: list[PairEntry] = field(default_factory=list)

    def entries(self, split: Optional[Split | str] = None) -> list[PairEntry]:
        split = Split(split) if split is not None else self.spec.split
        return {Split.TRAIN: self.train, Split.VAL: self.val, Split.TEST: self.test}[split]

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


@dataclass(frozen=True)
class StereoSample:
    left: torch.Tensor
    right: torch.Tensor
    source_id: str

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DatasetError(
                f"{self.source_id}: left {tuple(self.left.shape)} and right {tuple(self.right.shape)} differ in size"
            )

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.left.shape[-2:])


@dataclass(frozen=True)
class StereoBatch:
    left: torch.Tensor
    right: torch.Tensor
    source_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.source_ids)

    def to(self, device) -> "StereoBatch":
        return replace(self, left=self.left.to(device), right=self.right.to(device))


def _verify_image(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.verify()
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Cannot decode image {path}: {e}") from e


def _read_split_file(path: Path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip() and not line.lstrip().startswith("#")]


def write_split_file(entries: Sequence[PairEntry], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(entry.source_id + "\n")
    return path


def split_train_val(entries: Sequence[PairEntry], val_count: int, seed: int) -> tuple[list[PairEntry], list[PairEntry]]:
    """Hold out ``val_count`` pairs chosen by a seeded permutation; both parts stay sorted."""
    if val_count >= len(entries) and entries:
        raise DatasetError(f"val_count {val_count} leaves no training pairs out of {len(entries)}")
    gen = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(entries), generator=gen).tolist()
    held_out = set(order[:val_count])
    train = [e for i, e in enumerate(entries) if i not in held_out]
    val = [e for i, e in enumerate(entries) if i in held_out]
    return train, val


def load_dataset(spec: DatasetSpec) -> DatasetIndex:
    """Index the stereo folder described by ``spec``.

    Every file is checked for decodability up front, so a corrupt PNG fails
    here rather than in the middle of an epoch.
    """
    left_root, right_root = spec.root / spec.left_dir, spec.root / spec.right_dir
    for directory in (left_root, right_root):
        if not directory.is_dir():
            raise DatasetError(f"Dataset directory not found: {directory}")

    left = {p.stem: p for p in sorted(left_root.glob(spec.glob)) if p.is_file()}
    right = {p.stem: p for p in sorted(right_root.glob(spec.glob)) if p.is_file()}
    if not left and not right:
        raise DatasetError(f"No images matching {spec.glob!r} under {spec.root}")

    unpaired = sorted([left[k] for k in left.keys() - right.keys()] + [right[k] for k in right.keys() - left.keys()])
    if unpaired:
        raise DatasetError(f"Unpaired file: {unpaired[0]} ({len(unpaired)} unpaired in total)")

    entries = [PairEntry(source_id, left[source_id], right[source_id]) for source_id in sorted(left)]

    if spec.split_file is not None:
        wanted = _read_split_file(spec.split_file)
        by_id = {e.source_id: e for e in entries}
        missing = [s for s in wanted if s not in by_id]
        if missing:
            raise DatasetError(f"{spec.split_file} lists unknown source_id {missing[0]}")
        entries = [by_id[s] for s in sorted(set(wanted))]
        if not entries:
            raise DatasetError(f"{spec.split_file} selects no pairs")

    for entry in entries:
        _verify_image(entry.left_path)
        _verify_image(entry.right_path)

    index = DatasetIndex(spec=spec)
    if spec.split is Split.TEST:
        index.test = entries
    else:
        index.train, index.val = split_train_val(entries, spec.val_count, spec.seed)
    logger.info("Indexed %d pairs under %s (train %d, val %d, test %d)",
                len(index), spec.root, len(index.train), len(index.val), len(index.test))
    return index


def normalize(image: np.ndarray) -> torch.Tensor:
    """8-bit H×W×3 array to a 3×H×W float tensor, v / 127.5 - 1."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"normalize expects 8-bit input, got {image.dtype}")
    if image.ndim == 2:
        image = image[:, :, None]
    return torch.from_numpy(image.copy()).permute(2, 0, 1).to(torch.float32) / 127.5 - 1.0


def denormalize(t: torch.Tensor) -> np.ndarray:
    """Inverse of ``normalize`` with rounding: C×H×W (or 1×C×H×W) to an H×W×C uint8 array."""
    t = t.detach().cpu()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError(f"denormalize takes a single image, got batch of {t.shape[0]}")
        t = t[0]
    values = torch.round((t.to(torch.float64) + 1.0) * 127.5).clamp(0, 255)
    return values.to(torch.uint8).permute(1, 2, 0).numpy()


def load_sample(entry: PairEntry) -> StereoSample:
    try:
        left, right = image_io.read_png(entry.left_path), image_io.read_png(entry.right_path)
    except OSError as e:
        raise DatasetError(str(e)) from e
    return StereoSample(left=normalize(left), right=normalize(right), source_id=entry.source_id)


def draw_patch_offsets(height: int, width: int, patch: tuple[int, int], generator: torch.Generator) -> tuple[int, int]:
    """Uniform (y, x) with 0 <= y <= H - h and 0 <= x <= W - w."""
    ph, pw = patch
    if height < ph or width < pw:
        raise DatasetError(f"image {height}×{width} is smaller than patch {ph}×{pw}")
    y = int(torch.randint(0, height - ph + 1, (1,), generator=generator))
    x = int(torch.randint(0, width - pw + 1, (1,), generator=generator))
    return y, x


def crop(sample: StereoSample, y: int, x: int, size: tuple[int, int]) -> StereoSample:
    h, w = size
    return replace(sample, left=sample.left[..., y:y + h, x:x + w], right=sample.right[..., y:y + h, x:x + w])


def extract_patch(sample: StereoSample, patch: tuple[int, int], generator: torch.Generator) -> StereoSample:
    """Random crop of ``patch`` (h, w), at the same coordinates in both views."""
    height, width = sample.size
    try:
        y, x = draw_patch_offsets(height, width, patch, generator)
    except DatasetError as e:
        raise DatasetError(f"{sample.source_id}: {e}") from e
    return crop(sample, y, x, patch)


def center_crop(sample: StereoSample, size: tuple[int, int]) -> StereoSample:
    height, width = sample.size
    h, w = size
    if height < h or width < w:
        raise DatasetError(f"{sample.source_id}: image {height}×{width} is smaller than crop {h}×{w}")
    return crop(sample, (height - h) // 2, (width - w) // 2, size)


def apply_photometric(sample: StereoSample, gamma: float, brightness: float) -> StereoSample:
    """Gamma then brightness in [0, 1] space, identically on both views, clipped back to [-1, 1]."""
    if gamma == 1.0 and brightness == 1.0:
        return sample

    def adjust(t: torch.Tensor) -> torch.Tensor:
        unit = ((t + 1.0) / 2.0).clamp(0.0, 1.0)
        return (unit.pow(gamma) * brightness * 2.0 - 1.0).clamp(-1.0, 1.0)

    return replace(sample, left=adjust(sample.left), right=adjust(sample.right))


def augment(sample: StereoSample, generator: torch.Generator, fraction: float) -> StereoSample:
    """With probability ``fraction`` apply a random gamma and brightness change to the pair."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    low, high = AUGMENT_RANGE
    draws = torch.rand(3, generator=generator, dtype=torch.float64).tolist()
    if draws[0] >= fraction:
        return sample
    gamma = low + (high - low) * draws[1]
    brightness = low + (high - low) * draws[2]
    return apply_photometric(sample, gamma, brightness)


def training_transform(spec: DatasetSpec, generator: torch.Generator) -> Callable[[StereoSample], StereoSample]:
    def transform(sample: StereoSample) -> StereoSample:
        return augment(extract_patch(sample, spec.patch_size, generator), generator, spec.augment_fraction)
    return transform


def item_seed(epoch_seed: int, index: int) -> int:
    return (epoch_seed * 1_000_003 + index) % (2 ** 63)


class StereoPairDataset(Dataset):
    """Decoded, cropped and (for training) augmented pairs, one item per PairEntry.

    Training items draw their patch and augmentation from a generator seeded
    with ``item_seed(epoch_seed, index)``, so an item is the same whichever
    worker process loads it. Evaluation items are center-cropped to
    ``crop_size`` when one is given.
    """

    def __init__(
        self,
        entries: Sequence[PairEntry],
        spec: Optional[DatasetSpec] = None,
        train: bool = False,
        crop_size: Optional[tuple[int, int]] = None,
        epoch_seed: int = 0,
    ):
        if train and spec is None:
            raise ValueError("training items need a DatasetSpec for patch size and augmentation")
        self.entries = list(entries)
        self.spec = spec
        self.train = train
        self.crop_size = tuple(crop_size) if crop_size is not None else None
        self.epoch_seed = epoch_seed

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> StereoSample:
        sample = load_sample(self.entries[index])
        if self.train:
            generator = torch.Generator().manual_seed(item_seed(self.epoch_seed, index))
            return training_transform(self.spec, generator)(sample)
        if self.crop_size is not None:
            return center_crop(sample, self.crop_size)
        return sample


def collate_pairs(samples: Sequence[StereoSample]) -> StereoBatch:
    """DataLoader ``collate_fn``: stack a list of samples into a StereoBatch."""
    sizes = {s.size for s in samples}
    if len(sizes) != 1:
        raise DatasetError(f"cannot batch samples of different sizes {sorted(sizes)}; crop them first")
    left, right = default_collate([(s.left, s.right) for s in samples])
    return StereoBatch(left=left, right=right, source_ids=tuple(s.source_id for s in samples))


def batch_count(n: int, batch_size: int, train: bool) -> int:
    return n // batch_size if train else -(-n // batch_size)


def batches(
    entries: Sequence[PairEntry],
    batch_size: int,
    generator: Optional[torch.Generator] = None,
    train: bool = True,
    spec: Optional[DatasetSpec] = None,
    crop_size: Optional[tuple[int, int]] = None,
    workers: int = 0,
) -> DataLoader:
    """DataLoader over ``entries`` yielding StereoBatch.

    Training draws a shuffle seed and a per-epoch item seed from
    ``generator``, shuffles, and drops the last partial batch; evaluation
    keeps file order and every sample. ``workers`` are DataLoader worker
    processes decoding ahead of the consumer.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    shuffle_generator = None
    epoch_seed = 0
    if train:
        if generator is None:
            raise ValueError("training batches need a generator")
        shuffle_seed, epoch_seed = torch.randint(0, 2 ** 62, (2,), generator=generator).tolist()
        shuffle_generator = torch.Generator().manual_seed(shuffle_seed)
    dataset = StereoPairDataset(entries, spec, train=train, crop_size=crop_size, epoch_seed=epoch_seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=train,
        generator=shuffle_generator,
        num_workers=workers,
        drop_last=train,
        collate_fn=collate_pairs,
    )
