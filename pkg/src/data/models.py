from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from ..errors import ValidationError
from ..services.validators import GridValidator, ensure, raise_on_errors, require_shape

ResampleKernel = Literal["nearest", "bilinear", "bicubic"]
SpliceMode = Literal["inter", "intra"]
DatasetName = Literal["FED", "SD1", "SD2", "custom"]
SplitName = Literal["train", "val", "test"]

# smallest pasted region side at full scale; desk-scale blueprints lower it explicitly
DEFAULT_MIN_SIDE = 128


def _frozen(values: np.ndarray, dtype: type[np.generic]) -> np.ndarray:
    # 拷贝一份再锁定，调用方后续修改原数组不会影响已构造的对象
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Tile:
    """Non-negative amplitude grid plus the product it came from and the steps applied to it."""

    pixels: np.ndarray
    product_id: str
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        arr = _frozen(self.pixels, np.float32)
        require_shape(arr)
        raise_on_errors(GridValidator.validate_amplitude_grid(arr, self.product_id), context="tile")
        object.__setattr__(self, "pixels", arr)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def derive(self, pixels: np.ndarray, step: str, *, product_id: str | None = None) -> Tile:
        return Tile(pixels, product_id or self.product_id, (*self.provenance, step))


@dataclass(frozen=True, eq=False)
class TamperMask:
    """Binary grid: 1 marks spliced pixels, 0 pristine ones."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        raw = np.asarray(self.bits)
        require_shape(raw)
        ensure(GridValidator.validate_binary(raw), context="mask")
        object.__setattr__(self, "bits", _frozen(raw, np.uint8))

    @classmethod
    def empty(cls, height: int, width: int) -> TamperMask:
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))


@dataclass(frozen=True, eq=False)
class Fingerprint:
    values: np.ndarray
    extractor_id: str

    def __post_init__(self) -> None:
        arr = _frozen(self.values, np.float32)
        require_shape(arr)
        ensure(GridValidator.validate_finite(arr), context="fingerprint")
        ensure(GridValidator.validate_identifier(self.extractor_id, "extractor_id"), context="fingerprint")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, eq=False)
class NormalizedTile:
    """
    Tile mapped affinely into [0, 1].

    ``scale_min``/``scale_max`` are the source range; a constant tile maps to all
    zeros with both scale values equal to the constant.
    """

    pixels: np.ndarray
    scale_min: float
    scale_max: float
    product_id: str = "unknown"
    provenance: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        arr = _frozen(self.pixels, np.float64)
        require_shape(arr)
        ensure(GridValidator.validate_finite(arr), context="normalized tile")
        ensure(GridValidator.validate_unit_range(arr), context="normalized tile")
        if not (np.isfinite(self.scale_min) and np.isfinite(self.scale_max)) or self.scale_max < self.scale_min:
            raise ValidationError(f"invalid scale ({self.scale_min}, {self.scale_max})")
        object.__setattr__(self, "pixels", arr)
        object.__setattr__(self, "scale_min", float(self.scale_min))
        object.__setattr__(self, "scale_max", float(self.scale_max))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def with_pixels(self, pixels: np.ndarray, step: str) -> NormalizedTile:
        return NormalizedTile(pixels, self.scale_min, self.scale_max, self.product_id, (*self.provenance, step))


class ProductSignature(BaseModel):
    """Processing chain that makes one synthetic product distinguishable from another."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    resample_factor: float = Field(default=1.0, ge=0.5, le=3.0)
    resample_kernel: ResampleKernel = "bilinear"
    lowpass_sigma: float = Field(default=0.0, ge=0.0)
    quantization_step: float = Field(default=0.0, ge=0.0)
    looks: int = Field(default=1, ge=1, le=16)

    def describe(self) -> str:
        return (
            f"resize:{self.resample_factor:g}:{self.resample_kernel} lowpass:{self.lowpass_sigma:g} "
            f"quant:{self.quantization_step:g} looks:{self.looks}"
        )


class SceneConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    height: int = Field(ge=0)
    width: int = Field(ge=0)
    # smooth field, bright blobs, linear features
    texture_mix: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @field_validator("texture_mix")
    @classmethod
    def _check_mix(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(w < 0 for w in value):
            raise ValueError("texture weights must be >= 0")
        if abs(sum(value) - 1.0) > 1e-6:
            raise ValueError(f"texture weights must sum to 1, got {sum(value)}")
        return value


class EditDescriptor(BaseModel):
    """
    Serialized as ``{"kind": ..., "params": {...}, "seed": ...}``.

    ``kind`` is kept as a plain string here; dispatch (and its error for
    unknown kinds) happens in the edit engine.
    """

    model_config = ConfigDict(frozen=True)

    kind: str = "none"
    params: dict[str, float] = Field(default_factory=dict)
    seed: int = Field(default=0, ge=0)

    def param(self, name: str, default: float | None = None) -> float:
        if name in self.params:
            return float(self.params[name])
        if default is None:
            raise ValidationError(f"edit '{self.kind}' requires parameter '{name}'")
        return default


class SpliceRecord(BaseModel):
    """One manifest line. Paths are relative to the manifest directory."""

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0)
    spliced_path: str
    mask_path: str
    target_path: str
    donor_path: str
    donor_product: str
    target_product: str
    operation: str
    edit: EditDescriptor
    # (row, col, height, width) of the pasted area in the target
    region: tuple[int, int, int, int]
    # (row, col) of the crop origin inside the edited donor
    donor_origin: tuple[int, int]
    tile_shape: tuple[int, int]
    max_side: int = Field(gt=0)
    min_side: int = Field(default=DEFAULT_MIN_SIDE, gt=0)
    mode: SpliceMode

    @model_validator(mode="after")
    def _check_consistency(self) -> SpliceRecord:
        same = self.donor_product == self.target_product
        if (self.mode == "intra") != same:
            raise ValueError(f"mode '{self.mode}' inconsistent with donor/target products")
        row, col, height, width = self.region
        tile_h, tile_w = self.tile_shape
        if height < 1 or width < 1 or row < 0 or col < 0 or row + height > tile_h or col + width > tile_w:
            raise ValueError(f"region {self.region} outside tile bounds {self.tile_shape}")
        if self.min_side > self.max_side:
            raise ValueError(f"min_side {self.min_side} exceeds max_side {self.max_side}")
        if not (self.min_side <= height <= self.max_side and self.min_side <= width <= self.max_side):
            raise ValueError(f"region {self.region} sides outside [{self.min_side}, {self.max_side}]")
        return self


class DatasetManifest(BaseModel):
    name: DatasetName
    split: SplitName = "train"
    seed: int = 0
    records: list[SpliceRecord] = Field(default_factory=list)
    pristine_tiles: list[str] = Field(default_factory=list)

    _base_dir: Path | None = PrivateAttr(default=None)

    @property
    def base_dir(self) -> Path:
        return self._base_dir or Path(".")

    def bind(self, base_dir: Path) -> DatasetManifest:
        self._base_dir = Path(base_dir)
        return self

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.base_dir / path

    def tile_paths(self) -> set[str]:
        paths = set(self.pristine_tiles)
        for record in self.records:
            paths.update((record.spliced_path, record.target_path, record.donor_path))
        return paths


class ProductEntry(BaseModel):
    product_id: str
    signature: ProductSignature
    scene: SceneConfig
    seed: int
    raster: str
    tiles: list[str] = Field(default_factory=list)


class ProductRegistry(BaseModel):
    """Contents of ``products.json``; tile paths are relative to the registry file."""

    tile_side: int = Field(gt=0)
    products: list[ProductEntry] = Field(default_factory=list)

    _base_dir: Path | None = PrivateAttr(default=None)

    def bind(self, base_dir: Path) -> ProductRegistry:
        self._base_dir = Path(base_dir)
        return self

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() or self._base_dir is None else self._base_dir / path

    def sorted_products(self) -> list[ProductEntry]:
        return sorted(self.products, key=lambda p: p.product_id)
