"""
File codecs for tiles, fingerprints, masks, manifests and the product registry.

Grids are stored as row-major little-endian float32 (``.f32``) next to a JSON
sidecar with the same stem; masks are binary PGM (P5, maxval 255).
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import pydantic
from PIL import Image, UnidentifiedImageError

from ..errors import CorruptionError, FormatError, ValidationError
from .models import DatasetManifest, Fingerprint, ProductRegistry, SpliceRecord, TamperMask, Tile

logger = logging.getLogger(__name__)

GRID_DTYPE = "f32le"
_LE_F32 = np.dtype("<f4")
_PGM_MAGIC = b"P5"


def _stem(path: Path | str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in {".f32", ".json"} else p


def grid_paths(path: Path | str) -> tuple[Path, Path]:
    """``(payload, sidecar)`` for a grid path given with or without its suffix."""
    stem = _stem(path)
    return stem.with_name(stem.name + ".f32"), stem.with_name(stem.name + ".json")


def write_f32_blob(path: Path, values: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(values, dtype=_LE_F32).tobytes(order="C"))


def read_f32_blob(path: Path, count: int) -> np.ndarray:
    payload = path.read_bytes()
    expected = count * _LE_F32.itemsize
    if len(payload) != expected:
        raise CorruptionError(f"{path.name}: payload has {len(payload)} bytes, sidecar implies {expected}")
    return np.frombuffer(payload, dtype=_LE_F32).astype(np.float32)


def _write_grid(path: Path | str, values: np.ndarray, meta: dict[str, Any]) -> Path:
    payload_path, sidecar_path = grid_paths(path)
    height, width = values.shape
    sidecar = {"height": int(height), "width": int(width), "dtype": GRID_DTYPE, **meta}
    write_f32_blob(payload_path, values)
    sidecar_path.write_text(json.dumps(sidecar, ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8")
    return payload_path


def read_sidecar(path: Path | str) -> dict[str, Any]:
    sidecar_path = grid_paths(path)[1]
    try:
        return json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{sidecar_path.name}: sidecar is not valid JSON") from exc


def _read_grid(path: Path | str) -> tuple[np.ndarray, dict[str, Any]]:
    payload_path, sidecar_path = grid_paths(path)
    sidecar = read_sidecar(path)
    dtype = sidecar.get("dtype")
    if dtype != GRID_DTYPE:
        raise FormatError(f"{sidecar_path.name}: unsupported dtype {dtype!r}, expected {GRID_DTYPE!r}")
    try:
        height, width = int(sidecar["height"]), int(sidecar["width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"{sidecar_path.name}: missing or invalid height/width") from exc
    if height < 1 or width < 1:
        raise CorruptionError(f"{sidecar_path.name}: invalid dimensions {height}x{width}")
    values = read_f32_blob(payload_path, height * width).reshape(height, width)
    return values, sidecar


def save_tile(tile: Tile, path: Path | str) -> Path:
    return _write_grid(path, tile.pixels, {"product_id": tile.product_id, "provenance": list(tile.provenance)})


def load_tile(path: Path | str) -> Tile:
    values, sidecar = _read_grid(path)
    product_id = sidecar.get("product_id")
    if not isinstance(product_id, str):
        raise CorruptionError(f"{grid_paths(path)[1].name}: sidecar has no product_id")
    return Tile(values, product_id, tuple(sidecar.get("provenance", ())))


def save_fingerprint(fp: Fingerprint, path: Path | str) -> Path:
    return _write_grid(path, fp.values, {"extractor_id": fp.extractor_id, "kind": "fingerprint"})


def load_fingerprint(path: Path | str) -> Fingerprint:
    values, sidecar = _read_grid(path)
    return Fingerprint(values, str(sidecar.get("extractor_id") or "unknown"))


def save_mask(mask: TamperMask, path: Path | str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.bits * 255).astype(np.uint8)).save(target, format="PPM")
    return target


def load_mask(path: Path | str) -> TamperMask:
    source = Path(path)
    with source.open("rb") as f:
        magic = f.read(2)
    if magic != _PGM_MAGIC:
        raise FormatError(f"{source.name}: not a binary PGM (magic {magic!r})")
    try:
        with Image.open(source) as img:
            if img.mode != "L":
                raise FormatError(f"{source.name}: expected 8-bit grayscale, got mode {img.mode}")
            raw = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{source.name}: unreadable PGM") from exc
    if not np.all((raw == 0) | (raw == 255)):
        bad = int(np.count_nonzero((raw != 0) & (raw != 255)))
        raise FormatError(f"{source.name}: {bad} pixels are neither 0 nor 255")
    return TamperMask((raw == 255).astype(np.uint8))


def manifest_meta_path(path: Path | str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".meta.json")


def write_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    """One SpliceRecord per line, sorted keys, so equal inputs give byte-identical files."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(record.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        for record in sorted(manifest.records, key=lambda r: r.index)
    ]
    target.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    meta = {
        "name": manifest.name,
        "split": manifest.split,
        "seed": manifest.seed,
        "pristine_tiles": manifest.pristine_tiles,
        "records": len(lines),
    }
    manifest_meta_path(target).write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
    logger.info("Wrote manifest %s (%s records, %s pristine tiles)", target, len(lines), len(manifest.pristine_tiles))
    return target


def load_manifest(path: Path | str) -> DatasetManifest:
    source = Path(path)
    meta_path = manifest_meta_path(source)
    meta: dict[str, Any] = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    records: list[SpliceRecord] = []
    with source.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(SpliceRecord.model_validate_json(line))
            except pydantic.ValidationError as exc:
                raise ValidationError(f"{source.name}:{line_no}: invalid record: {exc}") from exc
    try:
        manifest = DatasetManifest(
            name=meta.get("name", "custom"),
            split=meta.get("split", "test"),
            seed=int(meta.get("seed", 0)),
            records=records,
            pristine_tiles=list(meta.get("pristine_tiles", [])),
        )
    except pydantic.ValidationError as exc:
        raise ValidationError(f"{meta_path.name}: invalid manifest metadata: {exc}") from exc
    return manifest.bind(source.parent)


def write_registry(registry: ProductRegistry, path: Path | str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(registry.model_dump_json(indent=2), encoding="utf-8")
    return target


def load_registry(path: Path | str) -> ProductRegistry:
    source = Path(path)
    try:
        registry = ProductRegistry.model_validate_json(source.read_text(encoding="utf-8"))
    except pydantic.ValidationError as exc:
        raise ValidationError(f"{source.name}: invalid product registry: {exc}") from exc
    return registry.bind(source.parent)
