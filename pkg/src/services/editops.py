"""
Editing operations applied to donor tiles before splicing.

All operations act on normalized tiles (values in [0, 1]) and are pure: the
input is never modified and the same descriptor (seed included) always gives
the same output. Interpolation helpers here are shared with the product
simulator so both sides use identical numerics.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from typing import Final

import numpy as np
from scipy import ndimage

from ..data.models import EditDescriptor, NormalizedTile, ResampleKernel
from ..errors import DispatchError, SizingError, ValidationError

logger = logging.getLogger(__name__)

_SPLINE_ORDER: Final[dict[str, int]] = {"nearest": 0, "bilinear": 1, "bicubic": 3}

EditFn = Callable[[np.ndarray, EditDescriptor], np.ndarray]
OperationSampler = Callable[[np.random.Generator], EditDescriptor]


def reflect_coordinates(coords: np.ndarray, size: int) -> np.ndarray:
    """Mirror continuous coordinates into ``[0, size - 1]`` (whole-sample symmetric, period ``2(size-1)``)."""
    if size == 1:
        return np.zeros_like(coords)
    period = 2.0 * (size - 1)
    folded = np.mod(coords, period)
    return np.where(folded > size - 1, period - folded, folded)


def _sample(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray, order: int) -> np.ndarray:
    rows = reflect_coordinates(rows, grid.shape[0])
    cols = reflect_coordinates(cols, grid.shape[1])
    return ndimage.map_coordinates(grid, [rows, cols], order=order, mode="mirror", prefilter=order > 1)


def resample(grid: np.ndarray, factor: float, kernel: ResampleKernel = "bilinear") -> np.ndarray:
    """
    Scale a grid by ``factor``; the output is ``round(f*H) x round(f*W)``.

    Pixel centres are aligned (``src = (dst + 0.5) / f - 0.5``); samples falling
    outside the support are mirrored back inside.
    """
    if factor <= 0:
        raise ValidationError(f"resample factor must be > 0, got {factor}")
    if kernel not in _SPLINE_ORDER:
        raise ValidationError(f"unknown resample kernel {kernel!r}")
    src = np.asarray(grid, dtype=np.float64)
    if factor == 1.0:
        return src.copy()
    out_h, out_w = round(factor * src.shape[0]), round(factor * src.shape[1])
    if out_h < 1 or out_w < 1:
        raise SizingError(f"resampling {src.shape} by {factor} gives an empty grid")
    row_axis = (np.arange(out_h, dtype=np.float64) + 0.5) / factor - 0.5
    col_axis = (np.arange(out_w, dtype=np.float64) + 0.5) / factor - 0.5
    rows, cols = np.meshgrid(row_axis, col_axis, indexing="ij")
    return _sample(src, rows, cols, _SPLINE_ORDER[kernel])


def rotate(grid: np.ndarray, angle_deg: float) -> np.ndarray:
    """
    Rotate about the grid centre with bilinear interpolation, keeping the size.

    Positive angles turn the content counter-clockwise as displayed (row axis
    pointing down). Output pixels whose source falls outside the grid are
    filled by mirroring.
    """
    src = np.asarray(grid, dtype=np.float64)
    height, width = src.shape
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    dr, dc = np.meshgrid(np.arange(height) - cy, np.arange(width) - cx, indexing="ij")
    src_rows = cy + cos_t * dr + sin_t * dc
    src_cols = cx + cos_t * dc - sin_t * dr
    return _sample(src, src_rows, src_cols, order=1)


def _edit_none(pixels: np.ndarray, _e: EditDescriptor) -> np.ndarray:
    return pixels


def _edit_rotate(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    return rotate(pixels, e.param("angle"))


def _edit_resize(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    return resample(pixels, e.param("factor"), "bilinear")


def _edit_rotate_resize(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    return resample(rotate(pixels, e.param("angle")), e.param("factor"), "bilinear")


def _edit_gaussian(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    rng = np.random.default_rng(e.seed)
    noise = rng.normal(0.0, math.sqrt(e.param("variance")), size=pixels.shape)
    return np.clip(pixels + noise, 0.0, 1.0)


def _edit_laplacian(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    # variance = 2 b^2
    rng = np.random.default_rng(e.seed)
    noise = rng.laplace(0.0, math.sqrt(e.param("variance") / 2.0), size=pixels.shape)
    return np.clip(pixels + noise, 0.0, 1.0)


def _edit_average_blur(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    # Even kernels cover [i - k//2, i + k//2 - 1]: half a pixel towards the top-left
    return ndimage.uniform_filter(pixels, size=int(e.param("kernel", 10.0)), mode="reflect")


def _edit_median_blur(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    side = int(e.param("kernel", 5.0))
    # lower middle order statistic when the window count is even
    rank = (side * side - 1) // 2
    return ndimage.rank_filter(pixels, rank=rank, size=side, mode="reflect")


def _edit_speckle(pixels: np.ndarray, e: EditDescriptor) -> np.ndarray:
    rng = np.random.default_rng(e.seed)
    noise = rng.normal(0.0, math.sqrt(e.param("variance")), size=pixels.shape)
    return np.clip(pixels * (1.0 + noise), 0.0, 1.0)


_DISPATCH: Final[dict[str, EditFn]] = {
    "none": _edit_none,
    "rotate": _edit_rotate,
    "resize": _edit_resize,
    "rotate_resize": _edit_rotate_resize,
    "gaussian_noise": _edit_gaussian,
    "laplacian_noise": _edit_laplacian,
    "average_blur": _edit_average_blur,
    "median_blur": _edit_median_blur,
    "speckle_noise": _edit_speckle,
}

EDIT_KINDS: Final[tuple[str, ...]] = tuple(_DISPATCH)


def validate_edit(e: EditDescriptor) -> None:
    """Check a descriptor's parameters against the ranges allowed for its kind."""
    if e.kind not in _DISPATCH:
        raise DispatchError(f"unknown edit kind {e.kind!r}; expected one of {', '.join(EDIT_KINDS)}")
    errors: list[str] = []
    if e.kind in {"rotate", "rotate_resize"}:
        angle = e.param("angle")
        if not -45.0 <= angle <= 45.0:
            errors.append(f"angle must lie in [-45, 45], got {angle}")
    if e.kind in {"resize", "rotate_resize"}:
        factor = e.param("factor")
        if not 1.0 < factor <= 2.5:
            errors.append(f"resize factor must lie in (1, 2.5], got {factor}")
    if e.kind in {"gaussian_noise", "laplacian_noise", "speckle_noise"}:
        variance = e.param("variance")
        if not (math.isfinite(variance) and variance >= 0):
            errors.append(f"variance must be >= 0, got {variance}")
    if e.kind in {"average_blur", "median_blur"}:
        kernel = e.param("kernel", 10.0 if e.kind == "average_blur" else 5.0)
        if kernel < 1 or kernel != int(kernel):
            errors.append(f"kernel side must be a positive integer, got {kernel}")
    if errors:
        raise ValidationError(f"edit '{e.kind}': " + "; ".join(errors))


def apply_edit(tile: NormalizedTile, e: EditDescriptor) -> NormalizedTile:
    validate_edit(e)
    if e.kind == "none":
        return tile
    out = _DISPATCH[e.kind](tile.pixels, e)
    # interpolation of values in [0, 1] can overshoot by an ulp
    out = np.clip(out, 0.0, 1.0)
    params = ",".join(f"{k}={v:g}" for k, v in sorted(e.params.items()))
    return tile.with_pixels(out, f"edit:{e.kind}:{params}:seed={e.seed}")


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def _angle(rng: np.random.Generator) -> float:
    return float(rng.uniform(-45.0, 45.0))


def _fixed(kind: str, **params: float) -> OperationSampler:
    return lambda rng: EditDescriptor(kind=kind, params=dict(params), seed=_seed(rng))


def _rotation(rng: np.random.Generator) -> EditDescriptor:
    return EditDescriptor(kind="rotate", params={"angle": _angle(rng)}, seed=_seed(rng))


def _rotation_resize(factor: float) -> OperationSampler:
    return lambda rng: EditDescriptor(
        kind="rotate_resize", params={"angle": _angle(rng), "factor": factor}, seed=_seed(rng)
    )


def _random_rotation_resize(rng: np.random.Generator) -> EditDescriptor:
    angle = _angle(rng)
    # U(1, 1.5) excluding the identity scale
    factor = float(np.nextafter(1.0, 2.0) + rng.uniform(0.0, 0.5))
    return EditDescriptor(kind="rotate_resize", params={"angle": angle, "factor": factor}, seed=_seed(rng))


def _noise(kind: str, max_variance: float) -> OperationSampler:
    def sample(rng: np.random.Generator) -> EditDescriptor:
        return EditDescriptor(kind=kind, params={"variance": float(rng.uniform(0.0, max_variance))}, seed=_seed(rng))

    return sample


SD1_OPERATIONS: Final[dict[str, OperationSampler]] = {
    "none": _fixed("none"),
    "rotate": _rotation,
    "resize_1.5": _fixed("resize", factor=1.5),
    "resize_2": _fixed("resize", factor=2.0),
    "resize_2.5": _fixed("resize", factor=2.5),
    "rotate_resize_1.5": _rotation_resize(1.5),
    "rotate_resize_2": _rotation_resize(2.0),
    "rotate_resize_2.5": _rotation_resize(2.5),
}

SD2_OPERATIONS: Final[dict[str, OperationSampler]] = {
    "none": _fixed("none"),
    "gaussian_noise": _noise("gaussian_noise", 0.1),
    "laplacian_noise": _noise("laplacian_noise", 0.1),
    "average_blur": _fixed("average_blur", kernel=10.0),
    "median_blur": _fixed("median_blur", kernel=5.0),
    "rotate_resize": _random_rotation_resize,
    "speckle_noise": _noise("speckle_noise", 0.3),
}
