import logging

import numpy as np

from ..data.models import NormalizedTile, Tile
from ..errors import SizingError, ValidationError
from .validators import GridValidator, require_shape

logger = logging.getLogger(__name__)


def partition_product(
    raster: np.ndarray,
    tile_side: int,
    *,
    product_id: str,
    provenance: tuple[str, ...] = (),
) -> list[Tile]:
    """
    Cut a product raster into non-overlapping ``tile_side`` squares in row-major order.

    Residual borders that do not fill a whole tile are dropped.
    """
    grid = np.asarray(raster)
    require_shape(grid)
    if tile_side < 1:
        raise SizingError(f"tile_side must be >= 1, got {tile_side}")
    height, width = grid.shape
    if height < tile_side or width < tile_side:
        raise SizingError(f"raster {height}x{width} is smaller than tile side {tile_side}")

    rows, cols = height // tile_side, width // tile_side
    tiles: list[Tile] = []
    for r in range(rows):
        for c in range(cols):
            block = grid[r * tile_side : (r + 1) * tile_side, c * tile_side : (c + 1) * tile_side]
            step = f"tile:{r}:{c}:{tile_side}"
            tiles.append(Tile(block, product_id, (*provenance, step)))
    logger.debug("Partitioned %s (%sx%s) into %s tiles of side %s", product_id, height, width, len(tiles), tile_side)
    return tiles


def normalize(tile: Tile) -> NormalizedTile:
    pixels = tile.pixels.astype(np.float64)
    valid, msg = GridValidator.validate_finite(pixels)
    if not valid:
        raise ValidationError(msg)
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi == lo:
        scaled = np.zeros_like(pixels)
    else:
        scaled = (pixels - lo) / (hi - lo)
    return NormalizedTile(scaled, lo, hi, tile.product_id, tile.provenance)


def denormalize(tile: NormalizedTile, *, product_id: str | None = None) -> Tile:
    """Map a normalized tile back to native amplitudes using its stored scale."""
    span = tile.scale_max - tile.scale_min
    native = tile.pixels * span + tile.scale_min
    # Rounding can push values a hair below zero when scale_min == 0
    native = np.maximum(native, 0.0)
    return Tile(native.astype(np.float32), product_id or tile.product_id, tile.provenance)


def crop(tile: Tile, row: int, col: int, height: int, width: int) -> Tile:
    if height < 1 or width < 1 or row < 0 or col < 0 or row + height > tile.height or col + width > tile.width:
        raise SizingError(f"crop ({row}, {col}, {height}, {width}) outside tile {tile.height}x{tile.width}")
    block = tile.pixels[row : row + height, col : col + width]
    return tile.derive(block, f"crop:{row}:{col}:{height}:{width}")
