"""
Synthetic amplitude products with controllable processing signatures.

Each product runs the same chain: reflectivity -> multilook speckle ->
resampling -> optional low-pass -> optional quantization. Different
signatures leave different traces in the high-pass residual, which is what the
fingerprint extractor learns to tell apart.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis

from ..data.models import ProductEntry, ProductRegistry, ProductSignature, SceneConfig
from ..data.storage import save_tile, write_f32_blob, write_registry
from ..errors import SizingError, ValidationError
from ..helpers import make_rng
from .editops import resample
from .raster import partition_product

logger = logging.getLogger(__name__)

_SMOOTH_SCALES = (2.0, 8.0, 32.0)
_HIGHPASS = np.array([[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]]) / 4.0


@dataclass(frozen=True)
class ProductRaster:
    pixels: np.ndarray
    provenance: tuple[str, ...]


def _smooth_field(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    field = np.zeros(shape, dtype=np.float64)
    for sigma in _SMOOTH_SCALES:
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
        std = layer.std()
        if std > 0:
            field += layer / std
    field /= len(_SMOOTH_SCALES) ** 0.5
    # bounded to [0.1, 2.5] so the field never spikes above a few times its mean
    return np.clip(1.0 + 0.3 * field, 0.1, 2.5)


def _blob_field(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    height, width = shape
    field = np.zeros(shape, dtype=np.float64)
    count = int(rng.poisson(max(1.0, height * width / 4096.0)))
    rows = rng.integers(0, height, size=count)
    cols = rng.integers(0, width, size=count)
    field[rows, cols] = rng.uniform(5.0, 20.0, size=count)
    field = ndimage.gaussian_filter(field, sigma=rng.uniform(1.0, 3.0), mode="constant")
    peak = field.max()
    if peak > 0:
        field *= 20.0 / peak
    return field


def _line_field(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    height, width = shape
    rr, cc = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    field = np.zeros(shape, dtype=np.float64)
    for _ in range(int(rng.integers(2, 6))):
        theta = rng.uniform(0.0, np.pi)
        offset = rng.uniform(0.0, height) * np.cos(theta) + rng.uniform(0.0, width) * np.sin(theta)
        distance = rr * np.cos(theta) + cc * np.sin(theta) - offset
        half_width = rng.uniform(0.8, 3.0)
        field += rng.uniform(2.0, 6.0) * np.exp(-(distance**2) / (2.0 * half_width**2))
    return field


def gen_reflectivity(cfg: SceneConfig) -> np.ndarray:
    """Deterministic non-negative scene for ``cfg.seed`` mixing smooth, blob and line textures."""
    if cfg.height < 1 or cfg.width < 1:
        raise SizingError(f"scene must have positive area, got {cfg.height}x{cfg.width}")
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.height, cfg.width)
    w_smooth, w_blobs, w_lines = cfg.texture_mix
    # draw every component so the stream layout does not depend on the weights
    smooth = _smooth_field(shape, rng)
    blobs = _blob_field(shape, rng)
    lines = _line_field(shape, rng)
    scene = w_smooth * smooth + w_blobs * (smooth * 0.5 + blobs) + w_lines * (smooth * 0.5 + lines)
    return np.maximum(scene, 0.0)


def apply_speckle(reflectivity: np.ndarray, looks: int, seed: int | np.random.Generator | None) -> np.ndarray:
    """
    Multilook speckle: intensity ``I = r * g`` with ``g ~ Gamma(L, 1/L)`` (mean 1, variance 1/L).

    ``reflectivity`` is read as intensity; the returned grid is amplitude ``sqrt(I)``.
    """
    if looks < 1:
        raise ValidationError(f"looks must be >= 1, got {looks}")
    intensity = np.asarray(reflectivity, dtype=np.float64)
    rng = make_rng(seed)
    gamma = rng.gamma(shape=float(looks), scale=1.0 / looks, size=intensity.shape)
    return np.sqrt(np.maximum(intensity, 0.0) * gamma)


def gen_product(cfg: SceneConfig, signature: ProductSignature, seed: int) -> ProductRaster:
    steps: list[str] = [f"reflectivity:seed={cfg.seed}"]
    raster = gen_reflectivity(cfg)

    raster = apply_speckle(raster, signature.looks, seed)
    steps.append(f"speckle:{signature.looks}:seed={seed}")

    raster = np.maximum(resample(raster, signature.resample_factor, signature.resample_kernel), 0.0)
    steps.append(f"resize:{signature.resample_factor:g}:{signature.resample_kernel}")

    if signature.lowpass_sigma > 0:
        raster = ndimage.gaussian_filter(raster, sigma=signature.lowpass_sigma, mode="reflect")
        steps.append(f"lowpass:{signature.lowpass_sigma:g}")

    if signature.quantization_step > 0:
        q = signature.quantization_step
        raster = np.round(raster / q) * q
        steps.append(f"quantize:{q:g}")

    return ProductRaster(raster, tuple(steps))


def highpass_residual(grid: np.ndarray) -> np.ndarray:
    return ndimage.correlate(np.asarray(grid, dtype=np.float64), _HIGHPASS, mode="reflect")


def residual_features(grid: np.ndarray, patch: int = 32) -> np.ndarray:
    """
    Per-patch 3x3 co-occurrence statistics of the high-pass residual.

    For each non-overlapping ``patch`` square: the residual's normalised
    correlation with its eight neighbours plus its log-variance.
    """
    residual = highpass_residual(grid)
    height, width = residual.shape
    rows, cols = height // patch, width // patch
    if rows == 0 or cols == 0:
        raise SizingError(f"grid {height}x{width} smaller than patch {patch}")
    offsets = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    features = np.empty((rows * cols, len(offsets) + 1), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            block = residual[i * patch : (i + 1) * patch, j * patch : (j + 1) * patch]
            centre = block[1:-1, 1:-1]
            centre = centre - centre.mean()
            energy = float((centre**2).mean()) + 1e-12
            row_feats = []
            for dr, dc in offsets:
                shifted = block[1 + dr : patch - 1 + dr, 1 + dc : patch - 1 + dc]
                shifted = shifted - shifted.mean()
                row_feats.append(float((centre * shifted).mean()) / energy)
            row_feats.append(float(np.log(energy)))
            features[i * cols + j] = row_feats
    return features


def residual_correlation(a: np.ndarray, b: np.ndarray, patch: int = 32) -> float:
    """Mean absolute correlation between the residual statistics of two grids, patch by patch."""
    fa, fb = residual_features(a, patch), residual_features(b, patch)
    n = min(len(fa), len(fb))
    fa, fb = fa[:n, :-1], fb[:n, :-1]
    fa = fa - fa.mean(axis=1, keepdims=True)
    fb = fb - fb.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(fa, axis=1) * np.linalg.norm(fb, axis=1) + 1e-12
    return float(np.mean(np.abs((fa * fb).sum(axis=1) / denom)))


def signature_separability(a: np.ndarray, b: np.ndarray, patch: int = 32) -> float:
    """Training accuracy of a linear discriminant separating patches of two products."""
    fa, fb = residual_features(a, patch), residual_features(b, patch)
    x = np.vstack([fa, fb])
    y = np.concatenate([np.zeros(len(fa)), np.ones(len(fb))])
    lda = LinearDiscriminantAnalysis()
    lda.fit(x, y)
    return float(lda.score(x, y))


SIGNATURE_CATALOG: tuple[ProductSignature, ...] = (
    ProductSignature(resample_factor=1.0, resample_kernel="nearest", looks=1),
    ProductSignature(resample_factor=1.5, resample_kernel="bicubic", quantization_step=0.05, looks=4),
    ProductSignature(resample_factor=1.25, resample_kernel="bilinear", lowpass_sigma=0.7, looks=2),
    ProductSignature(resample_factor=2.0, resample_kernel="nearest", quantization_step=0.02, looks=3),
    ProductSignature(resample_factor=0.75, resample_kernel="bicubic", looks=8),
    ProductSignature(resample_factor=1.5, resample_kernel="bilinear", lowpass_sigma=1.0, quantization_step=0.01),
)


def catalog_signatures(count: int) -> list[ProductSignature]:
    return [SIGNATURE_CATALOG[i % len(SIGNATURE_CATALOG)] for i in range(count)]


def _render_product(
    index: int,
    product_id: str,
    scene: SceneConfig,
    signature: ProductSignature,
    seed: int,
    tile_side: int,
    out_dir: str,
) -> ProductEntry:
    raster = gen_product(scene, signature, seed)
    root = Path(out_dir)
    product_dir = root / product_id
    raster_path = product_dir / "raster.f32"
    write_f32_blob(raster_path, raster.pixels)
    tiles = partition_product(raster.pixels, tile_side, product_id=product_id, provenance=raster.provenance)
    tile_paths: list[str] = []
    for t_index, tile in enumerate(tiles):
        path = save_tile(tile, product_dir / f"tile_{t_index:04d}")
        tile_paths.append(path.relative_to(root).as_posix())
    logger.info("Rendered product %s (#%s, %s): %s tiles", product_id, index, signature.describe(), len(tiles))
    return ProductEntry(
        product_id=product_id,
        signature=signature,
        scene=scene,
        seed=seed,
        raster=raster_path.relative_to(root).as_posix(),
        tiles=tile_paths,
    )


def generate_pool(
    n_products: int,
    *,
    height: int,
    width: int,
    tile_side: int,
    seed: int,
    out_dir: Path,
    signatures: Sequence[ProductSignature] | None = None,
    workers: int = 1,
) -> ProductRegistry:
    """
    Render ``n_products`` products (one scene each), tile them and write ``products.json``.

    Products are generated in parallel; the registry lists them in index order.
    """
    if n_products < 1:
        raise ValidationError("n_products must be >= 1")
    sigs = list(signatures) if signatures is not None else catalog_signatures(n_products)
    if len(sigs) < n_products:
        raise ValidationError(f"{len(sigs)} signatures given for {n_products} products")
    out_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    jobs = []
    for index in range(n_products):
        scene_seed, speckle_seed = (int(s) for s in master.integers(0, 2**63 - 1, size=2))
        scene = SceneConfig(height=height, width=width, seed=scene_seed)
        jobs.append((index, f"P{index:03d}", scene, sigs[index], speckle_seed, tile_side, str(out_dir)))

    if workers <= 1:
        entries = [_render_product(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_render_product, *zip(*jobs, strict=True)))

    registry = ProductRegistry(tile_side=tile_side, products=entries).bind(out_dir)
    write_registry(registry, out_dir / "products.json")
    return registry
