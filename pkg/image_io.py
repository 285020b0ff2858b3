# image_io.py
"""
File formats at the edges of the pipeline.

- Images and masks: 8-bit PNG via Pillow.
- Float maps (disparity, confidence): PFM, always written little-endian
  (negative scale line), rows stored bottom-to-top as the format requires.
- Float map previews: 8-bit grayscale PNG, value / vmax * 255 clipped to
  [0, 255]; no colormap.
"""

import logging
import re
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

PFM_HEADER_RE = re.compile(rb"^(\d+)\s+(\d+)\s*$")


def read_png(path: Path) -> np.ndarray:
    """Read an image as an H×W×3 uint8 array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as e:
        raise OSError(f"Cannot decode image {path}: {e}") from e


def write_png(array: np.ndarray, path: Path) -> Path:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"write_png expects uint8 data, got {array.dtype}")
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def read_mask(path: Path) -> np.ndarray:
    """Binary mask from an 8-bit PNG; nonzero pixels are True."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L")) > 0
    except (UnidentifiedImageError, OSError) as e:
        raise OSError(f"Cannot decode mask {path}: {e}") from e


def write_pfm(array: np.ndarray, path: Path) -> Path:
    """Write an H×W (or H×W×3) float map as little-endian PFM."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    if array.ndim == 2:
        kind = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM needs H×W or H×W×3 data, got shape {array.shape}")

    height, width = array.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(kind + b"\n")
        f.write(f"{width} {height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(array).astype("<f4").tobytes())
    return path


def read_pfm(path: Path) -> np.ndarray:
    """Read a PFM file into a float32 array (H×W or H×W×3), top row first."""
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind == b"PF":
            channels = 3
        elif kind == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path} is not a PFM file (header {kind!r})")

        match = PFM_HEADER_RE.match(f.readline().strip())
        if not match:
            raise ValueError(f"{path}: malformed PFM dimension line")
        width, height = int(match.group(1)), int(match.group(2))

        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(), dtype=endian + "f4")

    expected = width * height * channels
    if data.size < expected:
        raise ValueError(f"{path}: expected {expected} floats, found {data.size}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data[:expected].reshape(shape)).astype(np.float32)


def map_to_png(array: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Grayscale preview of a float map: 0 maps to black, ``vmax`` to white."""
    array = np.asarray(array, dtype=np.float64)
    if vmax is None:
        vmax = float(array.max()) if array.size else 1.0
    if vmax <= 0:
        vmax = 1.0
    return np.clip(np.round(array / vmax * 255.0), 0, 255).astype(np.uint8)


def write_map_png(array: np.ndarray, path: Path, vmax: float | None = None) -> Path:
    return write_png(map_to_png(array, vmax), path)


def list_pngs(directory: Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.glob("*.png") if p.is_file())
