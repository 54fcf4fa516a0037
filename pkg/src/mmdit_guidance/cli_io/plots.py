"""PNG output for attention heatmaps, masks and sample images.

Styling is fixed (nearest-neighbour upscaling, matplotlib's ``hot``
colormap, each map scaled by its own maximum) so outputs are byte-stable.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib import colormaps
from PIL import Image

from ..attention import WordAttention
from ..losses import GuidanceConfig

TILE = 8
GAP = 2


def _to_rgb(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    peak = m.max()
    scaled = m / peak if peak > 0 else np.zeros_like(m)
    return (colormaps["hot"](scaled)[..., :3] * 255).round().astype(np.uint8)


def panel(maps: Sequence[Sequence[np.ndarray]], tile: int = TILE) -> np.ndarray:
    """Grid of heatmaps; ``maps[row][col]`` is one 2-D map."""
    rows, cols = len(maps), max(len(r) for r in maps)
    h, w = np.asarray(maps[0][0]).shape
    th, tw = h * tile, w * tile
    out = np.full((rows * (th + GAP) + GAP, cols * (tw + GAP) + GAP, 3), 255, dtype=np.uint8)
    for r, row in enumerate(maps):
        for c, m in enumerate(row):
            rgb = np.kron(_to_rgb(m), np.ones((tile, tile, 1), dtype=np.uint8))
            y, x = GAP + r * (th + GAP), GAP + c * (tw + GAP)
            out[y : y + th, x : x + tw] = rgb
    return out


def attention_panels(word_attn: WordAttention, config: GuidanceConfig) -> np.ndarray:
    """One row per subject: encoder A and B maps over the early, late and full ranges."""
    ranges = (config.early_range, config.late_range, config.full_range)
    means = [word_attn.range(r).detach().cpu().numpy() for r in ranges]  # (N, 2, h, w) each
    rows = []
    for i in range(word_attn.n):
        rows.append([m[i, e] for e in (0, 1) for m in means])
    return panel(rows)


def save_png(array: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)
    return path


def mask_png(mask: np.ndarray, tile: int = TILE) -> np.ndarray:
    m = (np.asarray(mask, dtype=bool) * 255).astype(np.uint8)
    return np.kron(m, np.ones((tile, tile), dtype=np.uint8))


def image_png(pixels: np.ndarray, scale: int = 4) -> np.ndarray:
    arr = (np.clip(np.asarray(pixels), 0, 1) * 255).round().astype(np.uint8)
    return np.kron(arr, np.ones((scale, scale, 1), dtype=np.uint8))
