"""
Splicing attack fabrication and FED / SD1 / SD2 dataset assembly.

A splice edits the donor tile, crops a rectangle with sides in ``[min_side, max_side]`` from
it and pastes the rectangle at a random position of the target.
Dataset building is split into a pure planning step (which tiles, which edit,
which mode per record) and a materialisation step that renders records in
parallel and writes them in index order.
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ..data.models import (
    DEFAULT_MIN_SIDE,
    DatasetManifest,
    DatasetName,
    EditDescriptor,
    ProductRegistry,
    SpliceMode,
    SpliceRecord,
    SplitName,
    TamperMask,
    Tile,
)
from ..data.storage import load_tile, save_mask, save_tile, write_manifest
from ..errors import CapacityError, SizingError, ValidationError
from ..helpers import make_rng
from .editops import SD1_OPERATIONS, SD2_OPERATIONS, OperationSampler, apply_edit, validate_edit
from .raster import denormalize, normalize

logger = logging.getLogger(__name__)

FULL_SD1_SIDES: tuple[int, ...] = (128, 256)
FULL_SD2_SIDES: tuple[int, ...] = (128, 160, 192, 224, 256)
_MAX_CROP_ATTEMPTS = 16


class DatasetBlueprint(BaseModel):
    """What to build; sizes default to the full-scale composition."""

    name: DatasetName
    catalog: Literal["SD1", "SD2"] = "SD2"
    operations: list[str] = Field(default_factory=list)
    per_op: int = Field(default=0, ge=0)
    max_sides: list[int] = Field(default_factory=lambda: list(FULL_SD2_SIDES))
    modes: list[SpliceMode] = Field(default_factory=lambda: ["inter"])
    split: SplitName = "train"
    seed: int = Field(default=0, ge=0)
    # each pristine target tile can host at most this many splices
    max_target_reuse: int = Field(default=2, ge=1)
    # crop sides are drawn from [min_side, max_side]
    min_side: int = Field(default=DEFAULT_MIN_SIDE, gt=0)

    @model_validator(mode="after")
    def _check_sides(self) -> DatasetBlueprint:
        if not self.max_sides:
            raise ValueError("max_sides must not be empty")
        too_small = [side for side in self.max_sides if side < self.min_side]
        if too_small:
            raise ValueError(f"max_sides {too_small} are below min_side {self.min_side}")
        return self

    @classmethod
    def fed(cls, seed: int = 0) -> DatasetBlueprint:
        return cls(name="FED", split="train", seed=seed)

    @classmethod
    def sd1(
        cls,
        per_op: int = 200,
        seed: int = 0,
        max_sides: Sequence[int] = FULL_SD1_SIDES,
        min_side: int = DEFAULT_MIN_SIDE,
    ) -> DatasetBlueprint:
        return cls(
            name="SD1",
            catalog="SD1",
            operations=list(SD1_OPERATIONS),
            per_op=per_op,
            max_sides=list(max_sides),
            min_side=min_side,
            modes=["inter"],
            split="train",
            seed=seed,
        )

    @classmethod
    def sd2(
        cls,
        per_op: int = 1000,
        seed: int = 0,
        max_sides: Sequence[int] = FULL_SD2_SIDES,
        min_side: int = DEFAULT_MIN_SIDE,
    ) -> DatasetBlueprint:
        return cls(
            name="SD2",
            catalog="SD2",
            operations=list(SD2_OPERATIONS),
            per_op=per_op,
            max_sides=list(max_sides),
            min_side=min_side,
            modes=["inter", "intra"],
            split="test",
            seed=seed,
        )

    def samplers(self) -> dict[str, OperationSampler]:
        catalog = SD1_OPERATIONS if self.catalog == "SD1" else SD2_OPERATIONS
        unknown = [op for op in self.operations if op not in catalog]
        if unknown:
            raise ValidationError(f"operations {unknown} are not in the {self.catalog} catalog")
        return {op: catalog[op] for op in self.operations}


@dataclass(frozen=True)
class PoolSplit:
    """Tile paths per product for each dataset, relative to the registry directory."""

    fed: dict[str, list[str]]
    sd1: dict[str, list[str]]
    sd2: dict[str, list[str]]

    def for_dataset(self, name: DatasetName) -> dict[str, list[str]]:
        if name == "FED":
            return self.fed
        if name == "SD1":
            return self.sd1
        if name == "SD2":
            return self.sd2
        merged: dict[str, list[str]] = {}
        for part in (self.fed, self.sd1, self.sd2):
            for product, tiles in part.items():
                merged.setdefault(product, []).extend(tiles)
        return merged


@dataclass(frozen=True)
class RecordPlan:
    index: int
    operation: str
    mode: SpliceMode
    max_side: int
    target_product: str
    target_path: str
    donor_product: str
    donor_path: str
    edit: EditDescriptor


def split_pool(registry: ProductRegistry) -> PoolSplit:
    """
    First half of the products (by id) feeds FED and SD1, the rest SD2.

    Inside each FED/SD1 product the first half of its tiles goes to FED and the
    remainder to SD1, so the two sets share products but never a tile.
    """
    products = registry.sorted_products()
    if len(products) < 2:
        raise CapacityError(f"need at least 2 products to split the pool, have {len(products)}")
    n_train = math.ceil(len(products) / 2)
    fed: dict[str, list[str]] = {}
    sd1: dict[str, list[str]] = {}
    sd2: dict[str, list[str]] = {}
    for entry in products[:n_train]:
        tiles = list(entry.tiles)
        half = math.ceil(len(tiles) / 2)
        fed[entry.product_id] = tiles[:half]
        sd1[entry.product_id] = tiles[half:]
    for entry in products[n_train:]:
        sd2[entry.product_id] = list(entry.tiles)
    return PoolSplit(fed=fed, sd1=sd1, sd2=sd2)


def make_splice(
    donor: Tile,
    target: Tile,
    edit: EditDescriptor,
    max_side: int,
    rng: np.random.Generator,
    *,
    operation: str | None = None,
    min_side: int = DEFAULT_MIN_SIDE,
    crop: tuple[int, int, int, int] | None = None,
    position: tuple[int, int] | None = None,
) -> tuple[Tile, TamperMask, SpliceRecord]:
    """
    Edit ``donor``, crop a rectangle from it and paste it into ``target``.

    Crop sides lie in ``[min_side, max_side]``. ``crop`` (row, col, height, width
    inside the edited donor) and ``position`` (row, col inside the target) pin the
    otherwise random choices. The returned
    record has empty paths; the dataset builder fills them in.
    """
    if max_side < 1 or max_side > min(target.shape) or max_side > min(donor.shape):
        raise SizingError(f"max_side {max_side} does not fit tiles {donor.shape} / {target.shape}")
    if min_side < 1 or min_side > max_side:
        raise SizingError(f"min_side {min_side} must lie in [1, max_side={max_side}]")
    validate_edit(edit)

    if edit.kind == "none":
        edited = donor.pixels
    else:
        edited = denormalize(apply_edit(normalize(donor), edit)).pixels

    if crop is None:
        crop = _sample_crop(edited.shape, target.shape, min_side, max_side, rng)
    d_row, d_col, height, width = crop
    if (
        height < min_side
        or width < min_side
        or height > max_side
        or width > max_side
        or d_row < 0
        or d_col < 0
        or d_row + height > edited.shape[0]
        or d_col + width > edited.shape[1]
    ):
        raise SizingError(f"crop {crop} invalid for edited donor {edited.shape} and sides [{min_side}, {max_side}]")

    if position is None:
        position = (
            int(rng.integers(0, target.height - height + 1)),
            int(rng.integers(0, target.width - width + 1)),
        )
    row, col = position
    if row < 0 or col < 0 or row + height > target.height or col + width > target.width:
        raise SizingError(f"paste position {position} does not fit a {height}x{width} crop")

    spliced = np.array(target.pixels, copy=True)
    spliced[row : row + height, col : col + width] = edited[d_row : d_row + height, d_col : d_col + width]
    bits = np.zeros(target.shape, dtype=np.uint8)
    bits[row : row + height, col : col + width] = 1

    mode: SpliceMode = "intra" if donor.product_id == target.product_id else "inter"
    tile = target.derive(spliced, f"splice:{donor.product_id}:{edit.kind}:{row}:{col}:{height}:{width}")
    record = SpliceRecord(
        index=0,
        spliced_path="",
        mask_path="",
        target_path="",
        donor_path="",
        donor_product=donor.product_id,
        target_product=target.product_id,
        operation=operation or edit.kind,
        edit=edit,
        region=(row, col, height, width),
        donor_origin=(d_row, d_col),
        tile_shape=target.shape,
        max_side=max_side,
        min_side=min_side,
        mode=mode,
    )
    return tile, TamperMask(bits), record


def _sample_crop(
    donor_shape: tuple[int, int],
    target_shape: tuple[int, int],
    min_side: int,
    max_side: int,
    rng: np.random.Generator,
) -> tuple[int, int, int, int]:
    for _ in range(_MAX_CROP_ATTEMPTS):
        height = int(rng.integers(min_side, max_side + 1))
        width = int(rng.integers(min_side, max_side + 1))
        limit_h = min(donor_shape[0], target_shape[0])
        limit_w = min(donor_shape[1], target_shape[1])
        if height * width == 0 or height > limit_h or width > limit_w:
            continue
        d_row = int(rng.integers(0, donor_shape[0] - height + 1))
        d_col = int(rng.integers(0, donor_shape[1] - width + 1))
        return d_row, d_col, height, width
    raise SizingError(f"no valid crop with sides in [{min_side}, {max_side}] after {_MAX_CROP_ATTEMPTS} attempts")


def plan_dataset(blueprint: DatasetBlueprint, pool: dict[str, list[str]]) -> list[RecordPlan]:
    """Decide every record's operation, mode, tiles and edit without touching pixels."""
    if blueprint.name == "FED" or blueprint.per_op == 0:
        return []
    samplers = blueprint.samplers()
    products = sorted(p for p, tiles in pool.items() if tiles)
    if not products:
        raise CapacityError(f"{blueprint.name}: the product pool has no tiles")
    if "inter" in blueprint.modes and len(products) < 2:
        raise CapacityError(f"{blueprint.name}: inter-splicing needs 2 products, pool has {len(products)}")

    per_mode = _split_counts(blueprint.per_op, blueprint.modes)
    total = blueprint.per_op * len(samplers)
    targets = [(p, t) for p in products for t in pool[p]]
    capacity = len(targets) * blueprint.max_target_reuse
    if capacity < total:
        needed = math.ceil(total / blueprint.max_target_reuse)
        raise CapacityError(
            f"{blueprint.name}: {total} records need {needed} pristine target tiles at reuse "
            f"{blueprint.max_target_reuse}, pool has {len(targets)} (short by {needed - len(targets)})"
        )

    order_rng = np.random.default_rng([blueprint.seed, 0])
    order = order_rng.permutation(len(targets))
    plans: list[RecordPlan] = []
    index = 0
    for operation, sampler in samplers.items():
        for mode, count in per_mode:
            for _ in range(count):
                rng = make_rng(blueprint.seed, 1, index)
                target_product, target_path = targets[int(order[index % len(targets)])]
                donor_product, donor_path = _pick_donor(pool, products, target_product, target_path, mode, rng)
                plans.append(
                    RecordPlan(
                        index=index,
                        operation=operation,
                        mode=mode,
                        max_side=int(rng.choice(blueprint.max_sides)),
                        target_product=target_product,
                        target_path=target_path,
                        donor_product=donor_product,
                        donor_path=donor_path,
                        edit=sampler(rng),
                    )
                )
                index += 1
    return plans


def _split_counts(per_op: int, modes: Sequence[SpliceMode]) -> list[tuple[SpliceMode, int]]:
    unique = list(dict.fromkeys(modes))
    base, extra = divmod(per_op, len(unique))
    return [(mode, base + (1 if i < extra else 0)) for i, mode in enumerate(unique)]


def _pick_donor(
    pool: dict[str, list[str]],
    products: list[str],
    target_product: str,
    target_path: str,
    mode: SpliceMode,
    rng: np.random.Generator,
) -> tuple[str, str]:
    if mode == "inter":
        others = [p for p in products if p != target_product]
        donor_product = others[int(rng.integers(0, len(others)))]
        candidates = pool[donor_product]
    else:
        donor_product = target_product
        candidates = [t for t in pool[target_product] if t != target_path] or [target_path]
    return donor_product, candidates[int(rng.integers(0, len(candidates)))]


def _relative(path: Path, base: Path) -> str:
    return Path(os.path.relpath(path, base)).as_posix()


def _materialize(
    plan: RecordPlan, source_dir: str, out_dir: str, name: str, seed: int, min_side: int
) -> SpliceRecord:
    source, out = Path(source_dir), Path(out_dir)
    donor = load_tile(source / plan.donor_path)
    target = load_tile(source / plan.target_path)
    rng = make_rng(seed, 2, plan.index)
    tile, mask, record = make_splice(
        donor, target, plan.edit, plan.max_side, rng, operation=plan.operation, min_side=min_side
    )
    stem = out / "records" / f"{name.lower()}_{plan.index:05d}"
    spliced_path = save_tile(tile, stem)
    mask_path = save_mask(mask, stem.with_name(stem.name + "_mask.pgm"))
    return record.model_copy(
        update={
            "index": plan.index,
            "spliced_path": _relative(spliced_path, out),
            "mask_path": _relative(mask_path, out),
            "target_path": _relative(source / plan.target_path, out),
            "donor_path": _relative(source / plan.donor_path, out),
        }
    )


def build_dataset(
    blueprint: DatasetBlueprint,
    registry: ProductRegistry,
    out_dir: Path,
    *,
    workers: int = 1,
) -> DatasetManifest:
    """Plan and render a dataset, writing ``<name>.jsonl`` (plus its meta sidecar) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source_dir = registry.resolve(".")
    split = split_pool(registry)
    pool = split.for_dataset(blueprint.name)
    plans = plan_dataset(blueprint, pool)

    if workers <= 1 or len(plans) < 2:
        records = [
            _materialize(p, str(source_dir), str(out_dir), blueprint.name, blueprint.seed, blueprint.min_side)
            for p in plans
        ]
    else:
        n = len(plans)
        with ProcessPoolExecutor(max_workers=workers) as pool_exec:
            records = list(
                pool_exec.map(
                    _materialize,
                    plans,
                    [str(source_dir)] * n,
                    [str(out_dir)] * n,
                    [blueprint.name] * n,
                    [blueprint.seed] * n,
                    [blueprint.min_side] * n,
                    chunksize=max(1, n // (workers * 4)),
                )
            )

    pristine: list[str] = []
    if blueprint.name == "FED":
        pristine = [_relative(source_dir / t, out_dir) for p in sorted(pool) for t in pool[p]]

    manifest = DatasetManifest(
        name=blueprint.name,
        split=blueprint.split,
        seed=blueprint.seed,
        records=records,
        pristine_tiles=pristine,
    ).bind(out_dir)
    write_manifest(manifest, out_dir / f"{blueprint.name.lower()}.jsonl")
    logger.info("Built %s: %s records, %s pristine tiles", blueprint.name, len(records), len(pristine))
    return manifest


def assert_disjoint_splits(manifests: Sequence[DatasetManifest]) -> None:
    """No tile may appear in two different splits of the same experiment."""
    seen: dict[str, str] = {}
    for manifest in manifests:
        for rel in manifest.tile_paths():
            key = str(manifest.resolve(rel).resolve())
            previous = seen.setdefault(key, manifest.split)
            if previous != manifest.split:
                raise ValidationError(f"tile {rel} appears in splits '{previous}' and '{manifest.split}'")


def records_by_product(manifest: DatasetManifest) -> set[str]:
    products: set[str] = set()
    for record in manifest.records:
        products.update((record.donor_product, record.target_product))
    return products
