# losses.py
"""
Training objectives for the three phases.

    phase I    lambda0 (|L_DBP - L| + |R_DBP - R|) + lambda1 (|grad L_DBP - grad L| + |grad R_DBP - grad R|)
    phase II   lambda2 (|(2 / max d_RL) grad d_RL - grad L| + |(2 / max d_LR) grad d_LR - grad R|)
               + lambda3 (|L_DBP - L| + |R_DBP - R|)
    phase III  lambda4 REF + lambda5 grad REF + lambda6 final + lambda7 grad final
               + lambda8 (|V_LR - (1 - C_LR)| + |V_RL - (1 - C_RL)|)

|.| is the mean absolute value over every element. The norm of a gradient
pair is the sum of the x and y parts.
"""

import logging
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from consistency import PredictionBundle

logger = logging.getLogger(__name__)

DISPARITY_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 0.80
    lambda1: float = 0.20
    lambda2: float = 0.85
    lambda3: float = 0.15
    lambda4: float = 0.25
    lambda5: float = 0.05
    lambda6: float = 0.50
    lambda7: float = 0.13
    lambda8: float = 0.035

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value < 0:
                raise ValueError(f"{f.name} must be non-negative, got {value}")

    def scaled(self, factor: float) -> "LossWeights":
        return replace(self, **{f.name: getattr(self, f.name) * factor for f in fields(self)})


def _check_same_shape(**tensors: torch.Tensor) -> None:
    shapes = {name: tuple(t.shape) for name, t in tensors.items()}
    if len(set(shapes.values())) > 1:
        listed = ", ".join(f"{name}={shape}" for name, shape in shapes.items())
        raise ValueError(f"shape mismatch: {listed}")


def image_gradient(t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along x and y; the last column / row is zero."""
    if t.dim() < 2 or t.shape[-1] < 2 or t.shape[-2] < 2:
        raise ValueError(f"image_gradient needs H, W >= 2, got shape {tuple(t.shape)}")
    dx = F.pad(t[..., :, 1:] - t[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(t[..., 1:, :] - t[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def gradient_pair_l1(a: tuple[torch.Tensor, torch.Tensor], b: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    return l1(a[0], b[0]) + l1(a[1], b[1])


def gradient_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return gradient_pair_l1(image_gradient(a), image_gradient(b))


def disparity_normalizer(d: torch.Tensor, eps: float = DISPARITY_EPS) -> torch.Tensor:
    """2 / max(d) per sample, detached, floored at ``eps``; shaped N×1×1×1."""
    peak = d.detach().amax(dim=(-3, -2, -1), keepdim=True)
    return 2.0 / peak.clamp_min(eps)


def phase1_terms(L, R, L_dbp, R_dbp, w: LossWeights = LossWeights()) -> dict[str, torch.Tensor]:
    _check_same_shape(L=L, R=R, L_dbp=L_dbp, R_dbp=R_dbp)
    return {
        "dbp": w.lambda0 * (l1(L_dbp, L) + l1(R_dbp, R)),
        "dbp_gradient": w.lambda1 * (gradient_l1(L_dbp, L) + gradient_l1(R_dbp, R)),
    }


def loss_phase1(L, R, L_dbp, R_dbp, w: LossWeights = LossWeights()) -> torch.Tensor:
    return sum(phase1_terms(L, R, L_dbp, R_dbp, w).values())


def phase2_terms(
    L, R, L_dbp, R_dbp, d_lr, d_rl,
    w: LossWeights = LossWeights(),
    disparity_scale: Optional[Sequence] = None,
) -> dict[str, torch.Tensor]:
    """Per-term values of the phase II objective.

    ``disparity_scale`` = (s_lr, s_rl) replaces the detached 2 / max(d)
    factors; gradient checks pass it to hold the normalization fixed.
    """
    _check_same_shape(L=L, R=R, L_dbp=L_dbp, R_dbp=R_dbp)
    _check_same_shape(d_lr=d_lr, d_rl=d_rl)
    if d_lr.shape[-2:] != L.shape[-2:] or d_lr.shape[-3] != 1:
        raise ValueError(f"disparity {tuple(d_lr.shape)} must be a single-channel map over {tuple(L.shape)}")

    if disparity_scale is None:
        s_lr, s_rl = disparity_normalizer(d_lr), disparity_normalizer(d_rl)
    else:
        s_lr, s_rl = disparity_scale

    # d_RL lives on the left view's grid, d_LR on the right view's.
    grad_d_rl = tuple(s_rl * g for g in image_gradient(d_rl))
    grad_d_lr = tuple(s_lr * g for g in image_gradient(d_lr))
    return {
        "disparity_gradient": w.lambda2 * (
            gradient_pair_l1(grad_d_rl, image_gradient(L)) + gradient_pair_l1(grad_d_lr, image_gradient(R))
        ),
        "dbp": w.lambda3 * (l1(L_dbp, L) + l1(R_dbp, R)),
    }


def loss_phase2(L, R, L_dbp, R_dbp, d_lr, d_rl, w: LossWeights = LossWeights(),
                disparity_scale: Optional[Sequence] = None) -> torch.Tensor:
    return sum(phase2_terms(L, R, L_dbp, R_dbp, d_lr, d_rl, w, disparity_scale).values())


def phase3_terms(
    L, R,
    bundles: tuple[PredictionBundle, PredictionBundle],
    c_lr: torch.Tensor,
    c_rl: torch.Tensor,
    w: LossWeights = LossWeights(),
) -> dict[str, torch.Tensor]:
    """``bundles`` is (bundle predicting L, bundle predicting R)."""
    left, right = bundles
    _check_same_shape(L=L, R=R, L_ref=left.ref, R_ref=right.ref, L_final=left.blended, R_final=right.blended)
    _check_same_shape(V_RL=left.v, V_LR=right.v, C_LR=c_lr, C_RL=c_rl)
    return {
        "ref": w.lambda4 * (l1(left.ref, L) + l1(right.ref, R)),
        "ref_gradient": w.lambda5 * (gradient_l1(left.ref, L) + gradient_l1(right.ref, R)),
        "final": w.lambda6 * (l1(left.blended, L) + l1(right.blended, R)),
        "final_gradient": w.lambda7 * (gradient_l1(left.blended, L) + gradient_l1(right.blended, R)),
        "confidence": w.lambda8 * (l1(right.v, 1 - c_lr) + l1(left.v, 1 - c_rl)),
    }


def loss_phase3(L, R, bundles, c_lr, c_rl, w: LossWeights = LossWeights()) -> torch.Tensor:
    return sum(phase3_terms(L, R, bundles, c_lr, c_rl, w).values())
