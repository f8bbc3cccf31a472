"""Small image helpers shared by the data pipeline, inference and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def resize_bilinear(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (``align_corners=False``).

    Returns a copy unchanged in value when ``shape`` already matches.
    """
    image = np.asarray(image)
    shape = (int(shape[0]), int(shape[1]))
    if image.shape == shape:
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=shape, mode="bilinear", align_corners=False)
    return out[0, 0].numpy().astype(image.dtype if image.dtype.kind == "f" else np.float64)


def resize_tensor(x: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Same convention as :func:`resize_bilinear`, for N x C x H x W tensors."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def read_png(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a grayscale PNG and map it to [-1, 1].

    Returns the image and its bit depth (8 or 16).
    """
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            depth = 16
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
            depth = 8
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            depth = 8
    top = float(2**depth - 1)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return (arr / top * 2.0 - 1.0).astype(np.float32), depth


def write_png(path: str | Path, image: np.ndarray, depth: int = 8,
              value_range: tuple[float, float] = (-1.0, 1.0)) -> None:
    """Write ``image`` as a grayscale PNG, mapping ``value_range`` to the full bit depth."""
    if depth not in (8, 16):
        raise ValueError(f"unsupported bit depth {depth}")
    lo, hi = value_range
    top = 2**depth - 1
    scaled = np.clip((np.asarray(image, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    levels = np.rint(scaled * top)
    if depth == 8:
        Image.fromarray(levels.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(levels.astype(np.uint16)).save(path)
