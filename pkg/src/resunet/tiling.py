"""Overlapping-tile inference for images larger than the network input."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import model
from .data import TILE_SIZE

DEFAULT_OVERLAP = 14


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    tile_size: int
    overlap: int
    ys: tuple[int, ...]
    xs: tuple[int, ...]

    @property
    def origins(self) -> list[tuple[int, int]]:
        """(x, y) top-left corners in processing order: rows top to bottom, left to right."""
        return [(x, y) for y in self.ys for x in self.xs]

    def __len__(self) -> int:
        return len(self.ys) * len(self.xs)

    def coverage(self) -> np.ndarray:
        counts = np.zeros((self.height, self.width), np.int32)
        t = self.tile_size
        for x, y in self.origins:
            counts[y : y + t, x : x + t] += 1
        return counts


@dataclass
class SegmentationMap:
    probs: np.ndarray  # (1, 1, H, W)
    threshold: float | None = None
    binary: np.ndarray | None = None

    def binarize(self, threshold: float = 0.5) -> "SegmentationMap":
        return SegmentationMap(self.probs, threshold, (self.probs >= threshold).astype(np.uint8))


def _axis_origins(dim: int, tile: int, overlap: int) -> tuple[int, ...]:
    stride = tile - overlap
    origins = list(range(0, dim - tile + 1, stride))
    if origins[-1] != dim - tile:
        origins.append(dim - tile)
    return tuple(origins)


def plan_tiles(height: int, width: int, tile_size: int = TILE_SIZE, overlap: int = DEFAULT_OVERLAP) -> TileGrid:
    if not 0 <= overlap < tile_size:
        raise ValueError(f"overlap must satisfy 0 <= o < {tile_size}, got {overlap}")
    if height < tile_size or width < tile_size:
        raise ValueError(f"image {height}x{width} is smaller than the {tile_size}x{tile_size} tile")
    return TileGrid(
        height, width, tile_size, overlap,
        _axis_origins(height, tile_size, overlap),
        _axis_origins(width, tile_size, overlap),
    )


def stitch(tiles: Sequence[np.ndarray] | Mapping[tuple[int, int], np.ndarray], grid: TileGrid) -> SegmentationMap:
    """Average overlapping tile outputs; accumulation runs in grid order.

    ``tiles`` is either aligned with ``grid.origins`` or keyed by (x, y) origin,
    in which case the order it was filled in does not matter.
    """
    if isinstance(tiles, Mapping):
        if set(tiles) != set(grid.origins):
            raise ValueError(f"tile origins {sorted(tiles)} do not match the grid")
        tiles = [tiles[o] for o in grid.origins]
    if len(tiles) != len(grid):
        raise ValueError(f"got {len(tiles)} tiles for a grid of {len(grid)}")
    t = grid.tile_size
    acc = np.zeros((grid.height, grid.width), np.float64)
    for (x, y), tile in zip(grid.origins, tiles):
        tile = np.asarray(tile)
        if tile.size != t * t:
            raise ValueError(f"tile has shape {tile.shape}, expected {t}x{t}")
        acc[y : y + t, x : x + t] += tile.reshape(t, t)
    probs = acc / grid.coverage()
    return SegmentationMap(probs.astype(np.float32)[None, None])


def predict_image(
    image: np.ndarray,
    store: model.ParamStore,
    overlap: int = DEFAULT_OVERLAP,
    threshold: float | None = None,
    tile_size: int = TILE_SIZE,
    batch_size: int = 1,
) -> SegmentationMap:
    """Plan tiles, run each through the network in inference mode, stitch, optionally binarize."""
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"expected a single image (1, C, H, W), got {image.shape}")
    grid = plan_tiles(image.shape[2], image.shape[3], tile_size, overlap)
    crops = [image[:, :, y : y + tile_size, x : x + tile_size] for x, y in grid.origins]
    outs = []
    for i in range(0, len(crops), batch_size):
        batch = np.concatenate(crops[i : i + batch_size]).astype(np.float32, copy=False)
        outs.extend(model.forward(batch, store, model.INFERENCE))
    result = stitch(outs, grid)
    return result.binarize(threshold) if threshold is not None else result
