# weightfile.py
"""
Tensor directories: a plain-text manifest plus one little-endian binary blob.

    <dir>/manifest.txt   monoview-tensors 1
                         <name> <dtype> <shape> <offset>
                         ...
    <dir>/tensors.bin    concatenated little-endian payloads

Shapes are comma-separated (``32,3,3,3``); scalars are written as ``-``.
Model weights are always float32. Trainer state (Adam moments, step counters,
RNG states) reuses the same layout with int64 / uint8 entries.
"""

import logging
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "tensors.bin"
MANIFEST_HEADER = "monoview-tensors"

# manifest dtype name -> (little-endian numpy dtype, torch dtype)
DTYPES = {
    "float32": (np.dtype("<f4"), torch.float32),
    "float64": (np.dtype("<f8"), torch.float64),
    "int64": (np.dtype("<i8"), torch.int64),
    "uint8": (np.dtype("u1"), torch.uint8),
}
TORCH_TO_NAME = {torch_dtype: name for name, (_, torch_dtype) in DTYPES.items()}


class WeightFileError(ValueError):
    """Raised for malformed tensor directories or tensors that do not fit a module."""


def _format_shape(shape) -> str:
    return ",".join(str(s) for s in shape) if len(shape) else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "-":
        return ()
    return tuple(int(s) for s in text.split(","))


def save_tensors(tensors: Mapping[str, torch.Tensor], directory: Path) -> Path:
    """Write ``tensors`` (in mapping order) to ``directory``; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    rows = []
    offset = 0
    with open(directory / BLOB_NAME, "wb") as blob:
        for name, tensor in tensors.items():
            if any(c.isspace() for c in name):
                raise WeightFileError(f"Tensor name may not contain whitespace: {name!r}")
            tensor = tensor.detach().cpu()
            if tensor.dtype in (torch.float16, torch.bfloat16):
                tensor = tensor.to(torch.float32)
            dtype_name = TORCH_TO_NAME.get(tensor.dtype)
            if dtype_name is None:
                raise WeightFileError(f"Unsupported dtype {tensor.dtype} for tensor {name}")
            np_dtype = DTYPES[dtype_name][0]
            payload = np.ascontiguousarray(tensor.numpy(), dtype=np_dtype).tobytes()
            blob.write(payload)
            rows.append(f"{name} {dtype_name} {_format_shape(tensor.shape)} {offset}")
            offset += len(payload)

    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
        f.write(f"{MANIFEST_HEADER} {FORMAT_VERSION}\n")
        for row in rows:
            f.write(row + "\n")

    logger.debug("Wrote %d tensors (%d bytes) to %s", len(rows), offset, directory)
    return directory


def read_manifest(directory: Path) -> list[tuple[str, str, tuple[int, ...], int]]:
    manifest = Path(directory) / MANIFEST_NAME
    if not manifest.is_file():
        raise WeightFileError(f"No {MANIFEST_NAME} in {directory}")

    with open(manifest, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]

    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise WeightFileError(f"{manifest} is not a monoview tensor manifest")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{manifest}: unsupported format version {version}")

    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 4:
            raise WeightFileError(f"{manifest}:{lineno}: expected 'name dtype shape offset', got {line!r}")
        name, dtype_name, shape, offset = parts
        if dtype_name not in DTYPES:
            raise WeightFileError(f"{manifest}:{lineno}: unknown dtype {dtype_name!r} for {name}")
        entries.append((name, dtype_name, _parse_shape(shape), int(offset)))
    return entries


def load_tensors(directory: Path) -> dict[str, torch.Tensor]:
    """Read every tensor listed in the manifest, preserving manifest order."""
    directory = Path(directory)
    entries = read_manifest(directory)
    blob_path = directory / BLOB_NAME
    if not blob_path.is_file():
        raise WeightFileError(f"No {BLOB_NAME} in {directory}")
    blob = blob_path.read_bytes()

    tensors = {}
    for name, dtype_name, shape, offset in entries:
        np_dtype = DTYPES[dtype_name][0]
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * np_dtype.itemsize
        if end > len(blob):
            raise WeightFileError(f"Tensor {name} runs past the end of {blob_path}")
        array = np.frombuffer(blob, dtype=np_dtype, count=count, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(np_dtype.newbyteorder("="), copy=True))
    return tensors


def check_compatible(expected: Mapping[str, torch.Tensor], found: Mapping[str, torch.Tensor], source: str) -> None:
    """Raise naming the first tensor that is missing, unexpected or mis-shaped."""
    for name, tensor in expected.items():
        if name not in found:
            raise WeightFileError(f"{source}: missing tensor {name} (expected shape {tuple(tensor.shape)})")
        if tuple(found[name].shape) != tuple(tensor.shape):
            raise WeightFileError(
                f"{source}: tensor {name} has shape {tuple(found[name].shape)}, "
                f"expected {tuple(tensor.shape)}"
            )
    extra = sorted(set(found) - set(expected))
    if extra:
        raise WeightFileError(f"{source}: unexpected tensor {extra[0]}")


def load_into(module: nn.Module, directory: Path, prefix: str = "") -> None:
    """Copy the tensors in ``directory`` into ``module``'s parameters.

    ``prefix`` is stripped from manifest names, so an encoder-only file whose
    names start with ``encoder.`` can be loaded straight into the encoder.
    """
    found = load_tensors(directory)
    if prefix:
        found = {name[len(prefix):] if name.startswith(prefix) else name: t for name, t in found.items()}

    expected = module.state_dict()
    check_compatible(expected, found, str(directory))
    with torch.no_grad():
        for name, tensor in expected.items():
            tensor.copy_(found[name].to(tensor.dtype))
    logger.info("Loaded %d tensors from %s", len(expected), directory)
