# evalsuite.py
"""
Image quality metrics: PSNR, SSIM and disocclusion-masked PSNR.

All metrics are computed on 8-bit-equivalent values (peak 255). Torch
tensors are taken to be normalized [-1, 1] channel-first images; numpy
arrays are taken to be H×W(×C) pixel values already on the 0..255 scale.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

import datapipe
import image_io
from warp import WarpDirection

# Optional import for SSIM filtering
try:
    import cv2
    CV2_AVAILABLE = True
except ImportError:
    CV2_AVAILABLE = False

logger = logging.getLogger(__name__)

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

MetricFn = Callable[[np.ndarray, np.ndarray], float]


class EvaluationError(ValueError):
    """Raised for unpaired or mismatched evaluation files."""


def to_pixels(image) -> np.ndarray:
    """H×W×C float64 array on the 0..255 scale."""
    if torch.is_tensor(image):
        t = image.detach().cpu().to(torch.float64)
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ValueError(f"metrics take a single image, got batch of {t.shape[0]}")
            t = t[0]
        if t.dim() != 3:
            raise ValueError(f"expected a C×H×W tensor, got shape {tuple(image.shape)}")
        return ((t + 1.0) * 127.5).permute(1, 2, 0).numpy()
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"expected an H×W or H×W×C array, got shape {array.shape}")
    return array


def _as_mask(mask) -> np.ndarray:
    if torch.is_tensor(mask):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask).astype(bool)
    while mask.ndim > 2:
        if mask.shape[0] != 1:
            raise ValueError(f"mask must be a single H×W map, got shape {mask.shape}")
        mask = mask[0]
    return mask


def psnr(pred, gt, mask=None) -> float:
    """PSNR in dB over the masked pixels (all pixels without a mask); identical images give inf."""
    a, b = to_pixels(pred), to_pixels(gt)
    if a.shape != b.shape:
        raise ValueError(f"pred {a.shape} and gt {b.shape} differ in shape")
    sq = (a - b) ** 2
    if mask is not None:
        mask = _as_mask(mask)
        if mask.shape != a.shape[:2]:
            raise ValueError(f"mask {mask.shape} does not match image {a.shape[:2]}")
        if not mask.any():
            raise ValueError("mask selects no pixels")
        sq = sq[mask]
    mse = float(sq.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    if not CV2_AVAILABLE:
        raise RuntimeError("SSIM needs OpenCV (opencv-python) for Gaussian filtering")
    kernel = cv2.getGaussianKernel(size, sigma)
    return np.outer(kernel, kernel.transpose())


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    r = window.shape[0] // 2

    def filt(x):
        return cv2.filter2D(x, -1, window)[r:-r, r:-r]

    mu1, mu2 = filt(a), filt(b)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = filt(a * a) - mu1_sq
    sigma2_sq = filt(b * b) - mu2_sq
    sigma12 = filt(a * b) - mu1_mu2
    ssim_map = ((2 * mu1_mu2 + c1) * (2 * sigma12 + c2)) / ((mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2))
    return float(ssim_map.mean())


def ssim(pred, gt) -> float:
    """Single-scale SSIM, 11×11 Gaussian window (sigma 1.5), valid region only, averaged over channels."""
    a, b = to_pixels(pred), to_pixels(gt)
    if a.shape != b.shape:
        raise ValueError(f"pred {a.shape} and gt {b.shape} differ in shape")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[0]}×{a.shape[1]} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")
    window = gaussian_window()
    return float(np.mean([_ssim_channel(np.ascontiguousarray(a[:, :, c]), np.ascontiguousarray(b[:, :, c]), window)
                          for c in range(a.shape[2])]))


@dataclass
class ImageMetrics:
    image_id: str
    psnr: float
    ssim: float
    psnr_disocc: Optional[float] = None
    extra: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def record(self) -> dict:
        def enc(v):
            return "inf" if isinstance(v, float) and math.isinf(v) else v

        row = {"image_id": self.image_id, "psnr": enc(self.psnr), "ssim": self.ssim,
               "psnr_disocc": enc(self.psnr_disocc)}
        row.update({k: enc(v) for k, v in self.extra.items()})
        if self.flags:
            row["flags"] = self.flags
        return row


@dataclass
class MetricReport:
    rows: list[ImageMetrics] = field(default_factory=list)

    def aggregate(self) -> dict[str, Optional[float]]:
        """Arithmetic means over images; masked PSNR only over images that have it."""
        if not self.rows:
            return {"psnr": None, "ssim": None, "psnr_disocc": None}
        masked = [r.psnr_disocc for r in self.rows if r.psnr_disocc is not None]
        means = {
            "psnr": float(np.mean([r.psnr for r in self.rows])),
            "ssim": float(np.mean([r.ssim for r in self.rows])),
            "psnr_disocc": float(np.mean(masked)) if masked else None,
        }
        for name in sorted({k for r in self.rows for k in r.extra}):
            values = [r.extra[name] for r in self.rows if name in r.extra]
            means[name] = float(np.mean(values))
        return means


def _fmt(value: Optional[float], digits: int) -> str:
    if value is None:
        return "-"
    if math.isinf(value):
        return "inf"
    return f"{value:.{digits}f}"


def format_table(report: MetricReport) -> str:
    extras = sorted({k for r in report.rows for k in r.extra})
    header = f"{'image':<24} {'PSNR':>8} {'SSIM':>7} {'PSNR-dis':>9}" + "".join(f" {e:>9}" for e in extras)
    lines = [header, "-" * len(header)]
    for r in report.rows:
        line = f"{r.image_id:<24} {_fmt(r.psnr, 2):>8} {_fmt(r.ssim, 4):>7} {_fmt(r.psnr_disocc, 2):>9}"
        line += "".join(f" {_fmt(r.extra.get(e), 4):>9}" for e in extras)
        if r.flags:
            line += "  ! " + "; ".join(r.flags)
        lines.append(line)
    agg = report.aggregate()
    lines.append("-" * len(header))
    line = f"{'mean':<24} {_fmt(agg['psnr'], 2):>8} {_fmt(agg['ssim'], 4):>7} {_fmt(agg['psnr_disocc'], 2):>9}"
    line += "".join(f" {_fmt(agg.get(e), 4):>9}" for e in extras)
    lines.append(line)
    return "\n".join(lines)


def write_records(report: MetricReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in report.rows:
            f.write(json.dumps(row.record()) + "\n")
    return path


def evaluate_pair(
    image_id: str,
    pred_path: Path,
    gt_path: Path,
    mask_path: Optional[Path] = None,
    extra_metrics: Optional[Mapping[str, MetricFn]] = None,
) -> ImageMetrics:
    pred, gt = image_io.read_png(pred_path), image_io.read_png(gt_path)
    if pred.shape != gt.shape:
        raise EvaluationError(f"{image_id}: prediction {pred.shape} and ground truth {gt.shape} differ in size")
    row = ImageMetrics(image_id=image_id, psnr=psnr(pred, gt), ssim=ssim(pred, gt))

    if mask_path is not None:
        if not mask_path.is_file():
            row.flags.append("no mask file")
        else:
            mask = image_io.read_mask(mask_path)
            if mask.shape != gt.shape[:2]:
                raise EvaluationError(f"{image_id}: mask {mask.shape} does not match image {gt.shape[:2]}")
            if mask.any():
                row.psnr_disocc = psnr(pred, gt, mask)
            else:
                row.flags.append("empty disocclusion mask")
                logger.warning("%s: disocclusion mask is empty, masked PSNR omitted", image_id)

    for name, fn in (extra_metrics or {}).items():
        row.extra[name] = float(fn(pred, gt))
    return row


def evaluate_directory(
    pred_dir: Path,
    gt_dir: Path,
    mask_dir: Optional[Path] = None,
    extra_metrics: Optional[Mapping[str, MetricFn]] = None,
    workers: int = 0,
) -> MetricReport:
    """Score every PNG in ``pred_dir`` against the same-named PNG in ``gt_dir``.

    ``extra_metrics`` maps a column name to ``fn(pred_uint8, gt_uint8) -> float``;
    this is where a perceptual metric can be plugged in.
    """
    pred = {p.name: p for p in image_io.list_pngs(pred_dir)}
    gt = {p.name: p for p in image_io.list_pngs(gt_dir)}
    unpaired = sorted(pred.keys() ^ gt.keys())
    if unpaired:
        raise EvaluationError(f"Unpaired files: {', '.join(unpaired)}")
    if not pred:
        raise EvaluationError(f"No PNG files in {pred_dir}")

    names = sorted(pred)
    mask_dir = Path(mask_dir) if mask_dir is not None else None

    def score(name: str) -> ImageMetrics:
        mask_path = mask_dir / name if mask_dir is not None else None
        return evaluate_pair(Path(name).stem, pred[name], gt[name], mask_path, extra_metrics)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, names))
    else:
        rows = [score(name) for name in names]
    logger.info("Evaluated %d images from %s", len(rows), pred_dir)
    return MetricReport(rows=rows)


def evaluate_model(
    model,
    entries: Sequence[datapipe.PairEntry],
    crop_size: tuple[int, int],
    direction: WarpDirection | str = WarpDirection.LEFT_TO_RIGHT,
    extra_metrics: Optional[Mapping[str, MetricFn]] = None,
    batch_size: int = 1,
    workers: int = 0,
) -> MetricReport:
    """Synthesize the held-out view of each pair and score it against the real one.

    ``left_to_right`` feeds the left image and scores the prediction against
    the right one. Both views are center-cropped to ``crop_size`` first, and
    the prediction is quantized to 8 bits the way a written PNG would be.
    """
    direction = WarpDirection.parse(direction)
    if not entries:
        raise EvaluationError("No pairs to evaluate")
    model.eval()
    rows = []
    with torch.no_grad():
        for batch in datapipe.batches(entries, batch_size, train=False, crop_size=crop_size, workers=workers):
            source, target = (batch.left, batch.right) if direction is WarpDirection.LEFT_TO_RIGHT \
                else (batch.right, batch.left)
            views = model.predict(source, direction).blended
            for image_id, view, truth in zip(batch.source_ids, views, target):
                pred, gt = datapipe.denormalize(view), datapipe.denormalize(truth)
                row = ImageMetrics(image_id=image_id, psnr=psnr(pred, gt), ssim=ssim(pred, gt))
                for name, fn in (extra_metrics or {}).items():
                    row.extra[name] = float(fn(pred, gt))
                rows.append(row)
    logger.info("Evaluated %d pairs (%s, crop %dx%d)", len(rows), direction.value, *crop_size)
    return MetricReport(rows=rows)
