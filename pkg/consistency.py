# consistency.py
"""
Forward-backward disparity consistency, confidence maps and blending.

    C_RL(x, y) = exp(-gamma |d_RL(x, y) - d_LR(x - d_RL(x, y), y)|)
    C_LR(x, y) = exp(-gamma |d_LR(x, y) - d_RL(x + d_LR(x, y), y)|)
    L* = V_RL L_REF + (1 - V_RL) L_DBP      (and symmetrically for R*)

The cross-map lookups go through the same bilinear, border-clamped sampler
as ``warp``.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import torch

import image_io
from warp import WarpDirection, warp

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.07


@dataclass(frozen=True)
class ConsistencyParams:
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class PredictionBundle:
    """Everything one branch produces for a single target view.

    ``v`` is the learned blending weight of the REF image (an estimate of 1 - C);
    ``c`` is only filled in during training, when both disparities exist.
    """

    input: torch.Tensor
    dbp: torch.Tensor
    ref: torch.Tensor
    blended: torch.Tensor
    disparity: torch.Tensor
    v: torch.Tensor
    c: Optional[torch.Tensor] = None

    def with_confidence(self, c: torch.Tensor) -> "PredictionBundle":
        if c.shape != self.v.shape:
            raise ValueError(f"confidence shape {tuple(c.shape)} does not match v {tuple(self.v.shape)}")
        return replace(self, c=c)

    def detach(self) -> "PredictionBundle":
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        return PredictionBundle(**{k: None if t is None else t.detach() for k, t in fields.items()})


def confidence_maps(
    d_lr: torch.Tensor,
    d_rl: torch.Tensor,
    params: ConsistencyParams = ConsistencyParams(),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (C_LR, C_RL) for a pair of disparity maps of identical shape."""
    if d_lr.shape != d_rl.shape:
        raise ValueError(f"disparity maps differ in shape: {tuple(d_lr.shape)} vs {tuple(d_rl.shape)}")

    # d_LR(x - d_RL(x)) and d_RL(x + d_LR(x))
    d_lr_seen_from_rl = warp(d_lr, d_rl, WarpDirection.RIGHT_TO_LEFT)
    d_rl_seen_from_lr = warp(d_rl, d_lr, WarpDirection.LEFT_TO_RIGHT)

    c_lr = torch.exp(-params.gamma * (d_lr - d_rl_seen_from_lr).abs())
    c_rl = torch.exp(-params.gamma * (d_rl - d_lr_seen_from_rl).abs())
    return c_lr, c_rl


def blend(dbp: torch.Tensor, ref: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Per-pixel convex combination ``v * ref + (1 - v) * dbp``; ``v`` broadcasts over channels."""
    if dbp.shape != ref.shape:
        raise ValueError(f"dbp {tuple(dbp.shape)} and ref {tuple(ref.shape)} must match")
    if v.dim() != dbp.dim() or v.shape[-2:] != dbp.shape[-2:] or v.shape[-3] != 1:
        raise ValueError(f"v {tuple(v.shape)} must be a single-channel map over {tuple(dbp.shape)}")
    if bool((v < 0).any()) or bool((v > 1).any()):
        raise ValueError("blending weights must lie in [0, 1]")
    return v * ref + (1 - v) * dbp


def occlusion_mask(c: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Boolean mask of low-confidence (likely occluded) pixels, ``c < threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return c < threshold


def _as_hw(t: torch.Tensor) -> "torch.Tensor":
    t = t.detach().cpu()
    while t.dim() > 2:
        if t.shape[0] != 1:
            raise ValueError(f"expected a single map, got shape {tuple(t.shape)}")
        t = t[0]
    return t


def save_confidence(c: torch.Tensor, path_stem: Path, png: bool = True) -> list[Path]:
    """Write a confidence map as ``<stem>.pfm`` and, optionally, a grayscale ``<stem>.png``."""
    path_stem = Path(path_stem)
    data = _as_hw(c).numpy()
    written = [image_io.write_pfm(data, path_stem.with_suffix(".pfm"))]
    if png:
        written.append(image_io.write_map_png(data, path_stem.with_suffix(".png"), vmax=1.0))
    return written


def save_mask(mask: torch.Tensor, path: Path) -> Path:
    """Binary mask as an 8-bit PNG (255 = masked)."""
    data = _as_hw(mask).numpy().astype("uint8") * 255
    return image_io.write_png(data, path)
