# warp.py
"""
Parameter-free horizontal warping (the spatial transformer at the end of DBP).

    left_to_right:  R_DBP(x, y) = L(x + d_LR(x, y), y)
    right_to_left:  L_DBP(x, y) = R(x - d_RL(x, y), y)

Sampling is 1-D bilinear along x with sample coordinates clamped to
[0, W-1] (edge replication). At an exact integer sample position the
derivative with respect to the coordinate is taken from the segment to the
right of it; on the last column (and wherever the coordinate is clamped) it
is zero.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping

import torch

logger = logging.getLogger(__name__)


class WarpDirection(str, Enum):
    LEFT_TO_RIGHT = "left_to_right"
    RIGHT_TO_LEFT = "right_to_left"

    @property
    def sign(self) -> int:
        return 1 if self is WarpDirection.LEFT_TO_RIGHT else -1

    @classmethod
    def parse(cls, value: "str | WarpDirection") -> "WarpDirection":
        """Accepts the enum, its value, or the CLI shorthands ``lr`` / ``rl``."""
        if isinstance(value, cls):
            return value
        aliases = {"lr": cls.LEFT_TO_RIGHT, "rl": cls.RIGHT_TO_LEFT}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


class GradientCheckError(AssertionError):
    """Raised when analytic and finite-difference gradients disagree."""


def _as_batched(t: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ValueError(f"{name} must be C×H×W or N×C×H×W, got shape {tuple(t.shape)}")


def sample_horizontal(source: torch.Tensor, x_coords: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of ``source`` (N×C×H×W) at per-pixel column positions.

    ``x_coords`` is N×1×H×W in pixel units; it is clamped to the image.
    Written as v0 + w·(v1 - v0) so integer positions and constant rows are
    reproduced exactly.
    """
    width = source.shape[-1]
    x = x_coords.clamp(0, width - 1)
    x0 = x.detach().floor()
    w1 = x - x0
    index0 = x0.long().expand(-1, source.shape[1], -1, -1)
    index1 = (index0 + 1).clamp(max=width - 1)
    v0 = source.gather(3, index0)
    v1 = source.gather(3, index1)
    return v0 + w1 * (v1 - v0)


def warp(source: torch.Tensor, disparity: torch.Tensor, direction: WarpDirection | str) -> torch.Tensor:
    """Warp ``source`` horizontally by ``disparity`` (pixels) in ``direction``.

    Differentiable with respect to both ``source`` and ``disparity``.
    Accepts batched (N×C×H×W with N×1×H×W disparity) or unbatched input.
    """
    direction = WarpDirection.parse(direction)
    src, unbatched = _as_batched(source, "source")
    disp, _ = _as_batched(disparity, "disparity")

    if disp.shape[1] != 1:
        raise ValueError(f"disparity must have one channel, got shape {tuple(disparity.shape)}")
    if src.shape[0] != disp.shape[0] or src.shape[2:] != disp.shape[2:]:
        raise ValueError(
            f"source {tuple(source.shape)} and disparity {tuple(disparity.shape)} "
            f"must share batch size and H×W"
        )

    width = src.shape[-1]
    base = torch.arange(width, dtype=src.dtype, device=src.device).view(1, 1, 1, width)
    out = sample_horizontal(src, base + direction.sign * disp.to(src.dtype))
    return out.squeeze(0) if unbatched else out


@dataclass
class GradientReport:
    max_rel_error: float
    worst_input: str
    worst_index: tuple[int, ...]
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def raise_if_failed(self) -> "GradientReport":
        if not self.passed:
            raise GradientCheckError(
                f"gradient mismatch {self.max_rel_error:.3e} >= {self.tolerance:.1e} "
                f"at {self.worst_input}{list(self.worst_index)}"
            )
        return self


def finite_difference_check(
    fn: Callable[..., torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-2,
) -> GradientReport:
    """Compare autograd against central differences for a scalar ``fn(**inputs)``.

    Inputs are promoted to float64. Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    leaves = {name: t.detach().to(torch.float64).clone().requires_grad_(True) for name, t in inputs.items()}
    value = fn(**leaves)
    if value.numel() != 1:
        raise ValueError("finite_difference_check needs a scalar-valued function")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)

    worst = (0.0, "", ())
    checked = 0
    with torch.no_grad():
        for (name, leaf), grad in zip(leaves.items(), grads):
            analytic = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = fn(**leaves).item()
                flat[i] = original - h
                minus = fn(**leaves).item()
                flat[i] = original

                numeric = (plus - minus) / (2 * h)
                a = analytic.view(-1)[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                checked += 1
                if rel > worst[0] or not worst[1]:
                    index = tuple(int(k) for k in torch.unravel_index(torch.tensor(i), leaf.shape))
                    worst = (rel, name, index)

    return GradientReport(max_rel_error=worst[0], worst_input=worst[1], worst_index=worst[2],
                          tolerance=tolerance, checked=checked)


def warp_gradient_check(
    h: float = 1e-5,
    tolerance: float = 1e-4,
    size: int = 4,
    seed: int = 0,
    direction: WarpDirection | str = WarpDirection.LEFT_TO_RIGHT,
) -> GradientReport:
    """Finite-difference check of ``warp`` on a random size×size instance.

    Disparities have fractional parts in [0.2, 0.8] so no sample lands on
    the bilinear kink at integer positions. Raises GradientCheckError on failure.
    """
    if size > 8:
        raise ValueError("warp_gradient_check is meant for instances of at most 8×8")
    gen = torch.Generator().manual_seed(seed)
    source = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64) * 2 - 1
    whole = torch.randint(0, max(size // 2, 1), (1, 1, size, size), generator=gen).to(torch.float64)
    frac = 0.2 + 0.6 * torch.rand(1, 1, size, size, generator=gen, dtype=torch.float64)
    disparity = whole + frac
    weights = torch.randn(1, 3, size, size, generator=gen, dtype=torch.float64)

    def objective(source, disparity):
        return (warp(source, disparity, direction) * weights).sum()

    report = finite_difference_check(objective, {"source": source, "disparity": disparity}, h, tolerance)
    logger.info("warp gradient check: max relative error %.3e over %d coordinates",
                report.max_rel_error, report.checked)
    return report.raise_if_failed()
