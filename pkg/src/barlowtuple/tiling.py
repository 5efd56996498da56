"""Moving-window inference with center-crop stitching.

Windows of side ``patch`` step by ``patch - overlap``; each window
contributes only its central region to the output, so kept regions tile the
image exactly and every output pixel is written once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class Window:
    y: int
    x: int
    keep: tuple[int, int, int, int]  # y0, y1, x0, x1 in image coordinates


@dataclass
class WindowGrid:
    height: int
    width: int
    patch: int
    overlap: int
    windows: list[Window]

    def __len__(self) -> int:
        return len(self.windows)


def axis_origins(size: int, patch: int, stride: int) -> list[int]:
    n = math.ceil((size - patch) / stride) + 1
    return [min(i * stride, size - patch) for i in range(n)]


def _keep_bounds(origins: list[int], size: int, patch: int) -> list[tuple[int, int]]:
    # cut each overlap at its midpoint; on a regular grid this is the central
    # (patch - overlap) band, and edge windows extend to the border
    cuts = [0] + [(a + patch + b) // 2 for a, b in zip(origins, origins[1:])] + [size]
    return list(zip(cuts[:-1], cuts[1:]))


def plan_windows(h: int, w: int, patch: int = 256, overlap: int = 128) -> WindowGrid:
    if patch > h or patch > w:
        raise DimensionError(f"patch {patch} larger than image {h}x{w}")
    if not 0 <= overlap < patch:
        raise DimensionError(f"overlap must be in [0, patch), got {overlap}")
    stride = patch - overlap
    ys, xs = axis_origins(h, patch, stride), axis_origins(w, patch, stride)
    ky, kx = _keep_bounds(ys, h, patch), _keep_bounds(xs, w, patch)
    windows = [Window(y, x, (y0, y1, x0, x1)) for y, (y0, y1) in zip(ys, ky) for x, (x0, x1) in zip(xs, kx)]
    return WindowGrid(h, w, patch, overlap, windows)


def extract_windows(image: np.ndarray, grid: WindowGrid) -> np.ndarray:
    """``[N, C, P, P]`` stack of window crops from a ``[C, H, W]`` image."""
    P = grid.patch
    return np.stack([image[:, w.y:w.y + P, w.x:w.x + P] for w in grid.windows])


def stitch(grid: WindowGrid, logits: Sequence[np.ndarray]) -> np.ndarray:
    """Write the argmax of each window's kept region into a full-size mask."""
    if len(logits) != len(grid.windows):
        raise ContractError(f"expected {len(grid.windows)} window outputs, got {len(logits)}")
    out = np.full((grid.height, grid.width), -1, dtype=np.int64)
    for w, block in zip(grid.windows, logits):
        block = np.asarray(block)
        if block.shape[-2:] != (grid.patch, grid.patch):
            raise DimensionError(f"window output has spatial shape {block.shape[-2:]}")
        y0, y1, x0, x1 = w.keep
        out[y0:y1, x0:x1] = block[:, y0 - w.y:y1 - w.y, x0 - w.x:x1 - w.x].argmax(axis=0)
    return out


def predict_tiled(image: np.ndarray, model: Callable[[np.ndarray], np.ndarray], patch: int = 256,
                  overlap: int = 128, batch_size: int = 16) -> np.ndarray:
    """Run ``model`` (``[N, C, P, P]`` -> ``[N, K, P, P]`` logits) over the grid and stitch."""
    grid = plan_windows(image.shape[1], image.shape[2], patch, overlap)
    crops = extract_windows(image, grid)
    outputs = []
    for i in range(0, len(crops), batch_size):
        outputs.extend(model(crops[i:i + batch_size]))
    return stitch(grid, outputs)
