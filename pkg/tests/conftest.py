"""
Shared pytest fixtures and configuration for monoview tests.
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import image_io
from netdef import build_model


def stereo_texture(height: int, width: int, shift: float = 0.0, seed: int = 0) -> np.ndarray:
    """Smooth RGB texture; ``shift`` samples it at x + shift, so right = stereo_texture(..., shift=s)."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    channels = []
    for _ in range(3):
        period_x, period_y = rng.uniform(12.0, 20.0), rng.uniform(24.0, 40.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        channels.append(0.5 + 0.4 * np.sin(2 * np.pi * (x + shift) / period_x + 2 * np.pi * y / period_y + phase))
    return np.clip(np.round(np.stack(channels, axis=-1) * 255.0), 0, 255).astype(np.uint8)


@pytest.fixture
def temp_dir():
    """Create a temporary directory that is cleaned up after the test."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def make_stereo_folder():
    """
    Factory fixture writing a synthetic stereo dataset.

    Usage:
        def test_something(make_stereo_folder, temp_dir):
            root = make_stereo_folder(temp_dir, count=2, size=(64, 64), shift=0.5)
    """
    def _make(root: Path, count: int = 2, size: tuple[int, int] = (64, 64), shift: float = 0.5,
              left_dir: str = "left", right_dir: str = "right"):
        h, w = size
        for i in range(count):
            name = f"{i:03d}.png"
            image_io.write_png(stereo_texture(h, w, 0.0, seed=i), Path(root) / left_dir / name)
            image_io.write_png(stereo_texture(h, w, shift, seed=i), Path(root) / right_dir / name)
        return Path(root)
    return _make


@pytest.fixture
def tiny_model():
    """Freshly initialized model with seed 0."""
    return build_model(seed=0)


def zero_parameters(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for param in module.parameters():
            param.zero_()
