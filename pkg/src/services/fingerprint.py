"""
Noise-fingerprint extractor: a DnCNN-style fully convolutional network trained
with the distance-based logistic loss so patches from the same product map to
nearby fingerprints.

Three labelling regimes:

* ``BE``   same product *and* same position cell of the tile;
* ``SAE``  same product, any position;
* ``ASAE`` like SAE, on a pool doubled with resized copies treated as new products.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pydantic
from pydantic import BaseModel, Field, model_validator
from sklearn.metrics import roc_auc_score

from ..data.models import DatasetManifest, Fingerprint, NormalizedTile, Tile
from ..data.storage import load_tile, read_sidecar
from ..errors import (
    CapacityError,
    ConfigurationError,
    DegenerateBatchError,
    ModelError,
    SizingError,
    UndefinedMetricError,
    ValidationError,
)
from ..helpers import make_rng
from ..tensornet import AdamState, LayerSpec, Network, NetworkSpec, PlateauSchedule, adam_step, dbl_loss, pair_labels
from ..tensornet.losses import pairwise_sq_distances
from .editops import resample
from .raster import normalize

logger = logging.getLogger(__name__)

ExtractorMode = Literal["BE", "SAE", "ASAE"]
AUGMENTED_SUFFIX = "@x"


class ExtractorConfig(BaseModel):
    depth: int = Field(default=17, ge=2)
    width: int = Field(default=64, ge=1)
    patch: int = Field(default=48, ge=4)
    batch_products: int = Field(default=4, ge=1)
    tiles_per_product: int = Field(default=10, ge=1)
    patches_per_tile: int = Field(default=6, ge=1)
    mode: ExtractorMode = "SAE"
    lr: float = Field(default=1e-4, ge=0.0)
    max_epochs: int = Field(default=500, ge=1)
    iters_per_epoch: int = Field(default=128, ge=1)
    early_stop_patience: int = Field(default=30, ge=1)
    # BE position labels: the tile is split into position_grid x position_grid cells
    position_grid: int = Field(default=4, ge=1)
    augment_factor: float = Field(default=1.5, gt=1.0)
    val_split: Literal["product", "tile"] = "product"
    val_batches: int = Field(default=8, ge=1)
    fixed_batches: bool = False
    loader_threads: int = Field(default=4, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_batch(self) -> ExtractorConfig:
        if self.batch_size < 2:
            raise ValueError("a mini-batch needs at least 2 patches")
        return self

    @property
    def batch_size(self) -> int:
        return self.batch_products * self.tiles_per_product * self.patches_per_tile

    @classmethod
    def full(cls, mode: ExtractorMode = "SAE", seed: int = 0) -> ExtractorConfig:
        return cls(mode=mode, seed=seed)

    @classmethod
    def desk(cls, mode: ExtractorMode = "SAE", seed: int = 0) -> ExtractorConfig:
        return cls(
            depth=5,
            width=16,
            batch_products=2,
            tiles_per_product=4,
            patches_per_tile=6,
            iters_per_epoch=16,
            max_epochs=40,
            early_stop_patience=10,
            lr=1e-3,
            val_split="tile",
            val_batches=4,
            mode=mode,
            seed=seed,
        )


def dncnn_spec(depth: int, width: int, seed: int = 0) -> NetworkSpec:
    """conv+relu, (depth - 2) x [conv+bn+relu], conv down to one channel."""
    layers = [
        LayerSpec(kind="conv2d", name="conv0", out_channels=width),
        LayerSpec(kind="relu", name="relu0"),
    ]
    for i in range(1, depth - 1):
        layers += [
            LayerSpec(kind="conv2d", name=f"conv{i}", out_channels=width, bias=False),
            LayerSpec(kind="batch_norm", name=f"bn{i}"),
            LayerSpec(kind="relu", name=f"relu{i}"),
        ]
    layers.append(LayerSpec(kind="conv2d", name=f"conv{depth - 1}", out_channels=1))
    return NetworkSpec(in_channels=1, layers=layers, seed=seed)


@dataclass(frozen=True)
class TileSource:
    """Where a pool tile comes from; ``scale`` > 1 marks an augmented (resized and re-cropped) copy."""

    path: Path
    product_id: str
    scale: float = 1.0
    crop_seed: int = 0


TilePool = dict[str, list[TileSource]]


@dataclass(frozen=True)
class PatchSample:
    pixels: np.ndarray
    product_id: str
    grid_cell: int


@dataclass(frozen=True)
class MiniBatch:
    patches: np.ndarray  # (B, 1, patch, patch)
    product_ids: list[str]
    cells: list[int]
    labels: np.ndarray

    def samples(self) -> list[PatchSample]:
        return [
            PatchSample(self.patches[i, 0], pid, cell)
            for i, (pid, cell) in enumerate(zip(self.product_ids, self.cells, strict=True))
        ]


def pool_from_manifest(fed: DatasetManifest) -> TilePool:
    pool: TilePool = {}
    for rel in fed.pristine_tiles:
        path = fed.resolve(rel)
        product_id = str(read_sidecar(path).get("product_id") or "")
        if not product_id:
            raise ValidationError(f"{rel}: tile sidecar has no product_id")
        pool.setdefault(product_id, []).append(TileSource(path, product_id))
    return pool


def augment_tile(tile: Tile, factor: float, rng: np.random.Generator, *, product_id: str | None = None) -> Tile:
    """Bilinear resize by ``factor`` and a random crop back to the original size."""
    resized = np.maximum(resample(tile.pixels, factor, "bilinear"), 0.0)
    height, width = tile.shape
    if resized.shape[0] < height or resized.shape[1] < width:
        raise SizingError(f"factor {factor} shrinks {tile.shape} below its own size")
    row = int(rng.integers(0, resized.shape[0] - height + 1))
    col = int(rng.integers(0, resized.shape[1] - width + 1))
    block = resized[row : row + height, col : col + width]
    new_id = product_id or augmented_id(tile.product_id, factor)
    return tile.derive(block, f"augment:{factor:g}:{row}:{col}", product_id=new_id)


def augmented_id(product_id: str, factor: float) -> str:
    return f"{product_id}{AUGMENTED_SUFFIX}{factor:g}"


def augment_products(pool: TilePool, factor: float = 1.5, rng: np.random.Generator | int | None = None) -> TilePool:
    """Return the pool plus one resized copy of every product under a fresh product id."""
    gen = make_rng(rng)
    augmented: TilePool = {pid: list(sources) for pid, sources in pool.items()}
    for pid in sorted(pool):
        new_id = augmented_id(pid, factor)
        if new_id in augmented:
            raise ValidationError(f"product id collision for augmented copy '{new_id}'")
        augmented[new_id] = [
            TileSource(src.path, new_id, factor, int(gen.integers(0, 2**31 - 1))) for src in pool[pid]
        ]
    return augmented


@lru_cache(maxsize=512)
def load_source(source: TileSource) -> NormalizedTile:
    tile = load_tile(source.path)
    if source.scale != 1.0:
        tile = augment_tile(tile, source.scale, np.random.default_rng(source.crop_seed), product_id=source.product_id)
    return normalize(tile)


def _cell(row: int, col: int, patch: int, shape: tuple[int, int], grid: int) -> int:
    centre_r, centre_c = row + patch // 2, col + patch // 2
    return (centre_r * grid // shape[0]) * grid + (centre_c * grid // shape[1])


def build_minibatch(
    pool: TilePool,
    cfg: ExtractorConfig,
    rng: np.random.Generator,
    *,
    products: list[str] | None = None,
    threads: int | None = None,
) -> MiniBatch:
    """
    Sample ``batch_products`` x ``tiles_per_product`` x ``patches_per_tile`` patches.

    Patches inside a tile are drawn without replacement from its grid of
    non-overlapping patch slots. ``products`` fixes which products to use.
    """
    available = sorted(p for p, sources in pool.items() if sources)
    if products is None:
        if len(available) < cfg.batch_products:
            raise CapacityError(f"mini-batch needs {cfg.batch_products} products, pool has {len(available)}")
        chosen = [available[i] for i in rng.choice(len(available), size=cfg.batch_products, replace=False)]
    else:
        chosen = list(products)

    picks: list[TileSource] = []
    for pid in chosen:
        sources = pool[pid]
        replace = len(sources) < cfg.tiles_per_product
        for i in rng.choice(len(sources), size=cfg.tiles_per_product, replace=replace):
            picks.append(sources[int(i)])

    with ThreadPoolExecutor(max_workers=threads or cfg.loader_threads) as loader:
        tiles = list(loader.map(load_source, picks))

    patch = cfg.patch
    patches = np.empty((len(picks) * cfg.patches_per_tile, 1, patch, patch), dtype=np.float32)
    product_ids: list[str] = []
    cells: list[int] = []
    k = 0
    for source, tile in zip(picks, tiles, strict=True):
        slot_rows, slot_cols = tile.height // patch, tile.width // patch
        n_slots = slot_rows * slot_cols
        if n_slots < cfg.patches_per_tile:
            raise CapacityError(
                f"tile {tile.shape} holds {n_slots} patches of side {patch}, need {cfg.patches_per_tile}"
            )
        for slot in rng.choice(n_slots, size=cfg.patches_per_tile, replace=False):
            row, col = (int(slot) // slot_cols) * patch, (int(slot) % slot_cols) * patch
            patches[k, 0] = tile.pixels[row : row + patch, col : col + patch]
            product_ids.append(source.product_id)
            cells.append(_cell(row, col, patch, tile.shape, cfg.position_grid))
            k += 1

    labels = pair_labels(product_ids, cells if cfg.mode == "BE" else None)
    return MiniBatch(patches, product_ids, cells, labels)


@dataclass
class FingerprintExtractor:
    network: Network
    config: ExtractorConfig
    extractor_id: str

    def extract(self, tile: NormalizedTile | Tile) -> Fingerprint:
        normalized = normalize(tile) if isinstance(tile, Tile) else tile
        out = self.network.forward(normalized.pixels[None, None], "eval")
        return Fingerprint(out[0, 0], self.extractor_id)

    def batch_features(self, batch: MiniBatch) -> np.ndarray:
        out = self.network.forward(batch.patches, "eval")
        return out.reshape(out.shape[0], -1)

    def save(self, directory: Path | str) -> Path:
        return self.network.save(
            directory,
            metadata={"kind": "fingerprint", "extractor_id": self.extractor_id, "config": self.config.model_dump()},
        )

    @classmethod
    def load(cls, directory: Path | str) -> FingerprintExtractor:
        network, metadata = Network.load(directory)
        if metadata.get("kind") != "fingerprint":
            raise ModelError(f"{directory} does not hold a fingerprint extractor")
        try:
            config = ExtractorConfig.model_validate(metadata.get("config", {}))
        except pydantic.ValidationError as exc:
            raise ModelError(f"{directory}: stored extractor config is invalid: {exc}") from exc
        return cls(network, config, str(metadata.get("extractor_id") or "unknown"))


def default_extractor_id(cfg: ExtractorConfig) -> str:
    return f"{cfg.mode.lower()}-d{cfg.depth}w{cfg.width}-s{cfg.seed}"


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    skipped: int = 0


@dataclass
class TrainingResult:
    extractor: FingerprintExtractor
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False


def split_for_validation(pool: TilePool, how: Literal["product", "tile"]) -> tuple[TilePool, TilePool]:
    """Hold out half of the products (or half of every product's tiles) for validation."""
    products = sorted(p for p, sources in pool.items() if sources)
    if how == "product":
        if len(products) < 2:
            raise ConfigurationError(f"product validation split needs >= 2 products, pool has {len(products)}")
        n_train = math.ceil(len(products) / 2)
        train = {p: list(pool[p]) for p in products[:n_train]}
        val = {p: list(pool[p]) for p in products[n_train:]}
    else:
        train, val = {}, {}
        for p in products:
            half = math.ceil(len(pool[p]) / 2)
            train[p] = list(pool[p][:half])
            if pool[p][half:]:
                val[p] = list(pool[p][half:])
    if not val:
        raise ConfigurationError("validation split is empty")
    return train, val


def _batch_loss(network: Network, batch: MiniBatch, mode: Literal["train", "eval"]) -> tuple[float, np.ndarray, tuple]:
    out = network.forward(batch.patches, mode)
    loss, grad = dbl_loss(out.reshape(out.shape[0], -1), batch.labels)
    return loss, grad, out.shape


def _val_batches(val: TilePool, cfg: ExtractorConfig) -> list[MiniBatch]:
    rng = make_rng(cfg.seed, 1)
    n_products = min(cfg.batch_products, len(val))
    val_cfg = cfg.model_copy(update={"batch_products": n_products})
    return [build_minibatch(val, val_cfg, rng) for _ in range(cfg.val_batches)]


def train_extractor(
    pool: TilePool | DatasetManifest,
    cfg: ExtractorConfig,
    rng: np.random.Generator | int | None = None,
    *,
    val_pool: TilePool | None = None,
    extractor_id: str | None = None,
) -> TrainingResult:
    """
    Adam on the DBL loss with early stopping on the validation DBL loss.

    The returned extractor carries the parameters of the best validation epoch.
    """
    gen = make_rng(cfg.seed if rng is None else rng)
    full = pool_from_manifest(pool) if isinstance(pool, DatasetManifest) else pool
    if val_pool is None:
        train, val = split_for_validation(full, cfg.val_split)
    else:
        train, val = full, val_pool
    if not val:
        raise ConfigurationError("validation split is empty")
    if cfg.mode == "ASAE":
        train = augment_products(train, cfg.augment_factor, gen)
        val = augment_products(val, cfg.augment_factor, gen)
    train_products = sorted(p for p, s in train.items() if s)
    if len(train_products) < cfg.batch_products:
        raise CapacityError(f"training needs {cfg.batch_products} products, train split has {len(train_products)}")

    network = Network(dncnn_spec(cfg.depth, cfg.width, cfg.seed))
    extractor = FingerprintExtractor(network, cfg, extractor_id or default_extractor_id(cfg))
    state = AdamState.create(network.parameters(), cfg.lr)
    schedule = PlateauSchedule(lr=cfg.lr, stop_after=cfg.early_stop_patience)
    val_set = _val_batches(val, cfg)
    fixed = (
        [
            build_minibatch(train, cfg, gen, products=_take(train_products, i, cfg.batch_products))
            for i in range(cfg.iters_per_epoch)
        ]
        if cfg.fixed_batches
        else None
    )
    logger.info(
        "Training %s extractor: %s train / %s val products, batch %s, depth %s width %s",
        cfg.mode, len(train_products), len(val), cfg.batch_size, cfg.depth, cfg.width,
    )

    result = TrainingResult(extractor)
    best_params = {k: v.copy() for k, v in network.parameters().items()}
    best_buffers = {k: v.copy() for k, v in network.buffers().items()}
    for epoch in range(cfg.max_epochs):
        order = gen.permutation(train_products).tolist()
        losses: list[float] = []
        skipped = 0
        for it in range(cfg.iters_per_epoch):
            if fixed is not None:
                batch = fixed[it]
            else:
                batch = build_minibatch(train, cfg, gen, products=_take(order, it, cfg.batch_products))
            try:
                loss, grad, shape = _batch_loss(network, batch, "train")
            except DegenerateBatchError:
                skipped += 1
                continue
            network.backward(grad.reshape(shape))
            state.lr = schedule.lr
            network.set_parameters(adam_step(state, network.parameters(), network.gradients()))
            losses.append(loss)

        val_losses = []
        for batch in val_set:
            try:
                val_losses.append(_batch_loss(network, batch, "eval")[0])
            except DegenerateBatchError:
                continue
        if not val_losses:
            raise ConfigurationError("no validation batch has a positive pair")
        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = float(np.mean(val_losses))
        result.history.append(EpochLog(epoch, train_loss, val_loss, schedule.lr, skipped))
        logger.info("epoch %s: train %.5f val %.5f lr %.2g", epoch, train_loss, val_loss, schedule.lr)

        if schedule.update(epoch, val_loss):
            best_params = {k: v.copy() for k, v in network.parameters().items()}
            best_buffers = {k: v.copy() for k, v in network.buffers().items()}
        if schedule.should_stop:
            result.stopped_early = True
            logger.info("Early stop at epoch %s (best epoch %s)", epoch, schedule.best_epoch)
            break

    network.set_parameters(best_params)
    network.set_buffers(best_buffers)
    result.best_epoch = schedule.best_epoch
    result.best_val_loss = schedule.best
    return result


def _take(order: list[str], iteration: int, count: int) -> list[str]:
    start = iteration * count
    return [order[(start + j) % len(order)] for j in range(count)]


def pair_separation_auc(features: np.ndarray, product_ids: list[str]) -> float:
    """ROC AUC of ``-distance`` as a score for "same product" over all unordered pairs."""
    d = pairwise_sq_distances(np.asarray(features).reshape(len(product_ids), -1))
    same = pair_labels(product_ids).astype(bool)
    iu = np.triu_indices(len(product_ids), k=1)
    y, score = same[iu], -d[iu]
    if y.all() or not y.any():
        raise UndefinedMetricError("pair separation needs both same-product and cross-product pairs")
    return float(roc_auc_score(y, score))


def evaluate_separation(
    extractor: FingerprintExtractor, pool: TilePool, rng: np.random.Generator | int | None = None, batches: int = 4
) -> dict[str, Any]:
    """Held-out diagnostic: AUC plus mean positive/negative pair distances over a few sampled batches."""
    gen = make_rng(rng)
    n_products = min(extractor.config.batch_products, len(pool))
    cfg = extractor.config.model_copy(update={"batch_products": n_products, "mode": "SAE"})
    features, ids = [], []
    for _ in range(batches):
        batch = build_minibatch(pool, cfg, gen)
        features.append(extractor.batch_features(batch))
        ids.extend(batch.product_ids)
    feats = np.concatenate(features)
    d = pairwise_sq_distances(feats)
    same = pair_labels(ids).astype(bool)
    iu = np.triu_indices(len(ids), k=1)
    return {
        "auc": pair_separation_auc(feats, ids),
        "positive_mean": float(d[iu][same[iu]].mean()),
        "negative_mean": float(d[iu][~same[iu]].mean()),
        "pairs": int(len(iu[0])),
    }
