"""Basis traversals and magnitude sweeps rendered as tile grids."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .data import to_image_range, to_model_range
from .networks import SynthesisModel

MAGNITUDE_FACTORS = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0)


@dataclass
class TileGrid:
    input: np.ndarray  # H x W x 3
    tiles: np.ndarray  # rows x cols x H x W x 3
    coefficients: np.ndarray  # rows x cols x q
    column_values: list[float]

    def compose(self, pad: int = 2) -> np.ndarray:
        """Input tile in the top-left, one blank cell below it per extra row,
        then the tile rows to its right."""
        rows, cols, h, w, c = self.tiles.shape
        H = rows * h + (rows + 1) * pad
        W = (cols + 1) * w + (cols + 2) * pad
        canvas = np.ones((H, W, c))
        canvas[pad:pad + h, pad:pad + w] = self.input
        for r in range(rows):
            for k in range(cols):
                y = pad + r * (h + pad)
                x = pad + (k + 1) * (w + pad)
                canvas[y:y + h, x:x + w] = self.tiles[r, k]
        return canvas


@torch.no_grad()
def _render(model: SynthesisModel, image: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    x = to_model_range([image])
    content = model.encode(x)
    flat = torch.from_numpy(coeffs.reshape(-1, coeffs.shape[-1]).astype(np.float32))
    out = model.synthesize(x.expand(flat.shape[0], -1, -1, -1), flat, content=content.expand(flat.shape[0], -1, -1, -1))
    imgs = to_image_range(out)
    return imgs.reshape(*coeffs.shape[:-1], *imgs.shape[1:])


def render_traversal(model: SynthesisModel, image: np.ndarray, mode: str = "basis",
                     bases: Sequence[int] = (0, 1, 2), sigma_steps: int = 5, sigma_max: float = 3.0,
                     factors: Sequence[float] = MAGNITUDE_FACTORS, seed: int = 0, n_directions: int = 1) -> TileGrid:
    """Synthesize a grid of tiles from one input image.

    basis mode: one row per basis index; across a row that single
    coefficient runs from -sigma_max to +sigma_max (o ~ N(0, I), so sigma = 1)
    while the other q - 1 entries stay 0.
    magnitude mode: one row per sampled unit direction; columns scale it by
    ``factors``.
    """
    q = model.q
    if mode == "basis":
        for b in bases:
            if not 0 <= b < q:
                raise IndexError(f"basis index {b} out of range for q={q}")
        values = np.linspace(-sigma_max, sigma_max, sigma_steps)
        coeffs = np.zeros((len(bases), sigma_steps, q))
        for r, b in enumerate(bases):
            coeffs[r, :, b] = values
    elif mode == "magnitude":
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((n_directions, q))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        values = np.asarray(factors, dtype=np.float64)
        coeffs = values[None, :, None] * dirs[:, None, :]
    else:
        raise ValueError(f"unknown traversal mode {mode!r}")
    tiles = _render(model, image, coeffs)
    return TileGrid(np.asarray(image), tiles, coeffs, [float(v) for v in values])


def save_image(arr: np.ndarray, path):
    img = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")
