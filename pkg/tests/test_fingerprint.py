import numpy as np
import pytest

import src.services.fingerprint as fingerprint_module
from src.data.models import ProductSignature, SceneConfig
from src.data.storage import save_tile
from src.errors import CapacityError, ConfigurationError, ModelError, UndefinedMetricError
from src.services.fingerprint import (
    ExtractorConfig,
    FingerprintExtractor,
    TileSource,
    augment_products,
    augment_tile,
    augmented_id,
    build_minibatch,
    default_extractor_id,
    dncnn_spec,
    evaluate_separation,
    load_source,
    pair_separation_auc,
    pool_from_manifest,
    split_for_validation,
    train_extractor,
)
from src.services.raster import partition_product
from src.services.splicer import DatasetBlueprint, build_dataset
from src.services.synthgrd import gen_product
from src.tensornet import Network


@pytest.fixture(scope="module")
def fed(registry, tmp_path_factory):
    return build_dataset(DatasetBlueprint.fed(seed=2), registry, tmp_path_factory.mktemp("fed"))


@pytest.fixture(scope="module")
def fed_pool(fed):
    return pool_from_manifest(fed)


def _small(mode="SAE", **overrides) -> ExtractorConfig:
    base = {
        "depth": 3,
        "width": 4,
        "patch": 16,
        "batch_products": 2,
        "tiles_per_product": 2,
        "patches_per_tile": 3,
        "iters_per_epoch": 2,
        "max_epochs": 2,
        "val_batches": 2,
        "val_split": "tile",
        "loader_threads": 2,
        "lr": 1e-3,
        "mode": mode,
    }
    return ExtractorConfig(**(base | overrides))


def test_dncnn_layout():
    spec = dncnn_spec(17, 64)
    convs = [layer for layer in spec.layers if layer.kind == "conv2d"]
    assert len(convs) == 17
    assert len(spec.layers) == 2 + 15 * 3 + 1
    assert convs[-1].out_channels == 1
    assert sum(layer.kind == "batch_norm" for layer in spec.layers) == 15
    assert spec.pooling_levels == 0


def test_presets():
    full = ExtractorConfig.full("BE")
    assert (full.depth, full.width, full.patch, full.batch_size) == (17, 64, 48, 240)
    assert full.lr == 1e-4
    assert (full.iters_per_epoch, full.max_epochs, full.early_stop_patience) == (128, 500, 30)
    desk = ExtractorConfig.desk()
    assert (desk.depth, desk.width) == (5, 16)
    with pytest.raises(ValueError):
        ExtractorConfig(batch_products=1, tiles_per_product=1, patches_per_tile=1)


def test_pool_from_manifest_groups_by_product(fed, fed_pool):
    assert sorted(fed_pool) == ["P000", "P001"]
    assert sum(len(v) for v in fed_pool.values()) == len(fed.pristine_tiles)
    assert all(src.scale == 1.0 for sources in fed_pool.values() for src in sources)


def test_augmentation(fed_pool, make_tile, rng):
    assert augmented_id("P001", 1.5) == "P001@x1.5"
    tile = make_tile(32, 32, "P001")
    out = augment_tile(tile, 1.5, rng)
    assert out.shape == tile.shape
    assert out.product_id == "P001@x1.5"
    assert out.provenance[-1].startswith("augment:1.5:")

    doubled = augment_products(fed_pool, 1.5, rng=3)
    assert sorted(doubled) == ["P000", "P000@x1.5", "P001", "P001@x1.5"]
    assert len(doubled["P001@x1.5"]) == len(fed_pool["P001"])
    assert {src.scale for src in doubled["P000@x1.5"]} == {1.5}
    assert {src.product_id for src in doubled["P000@x1.5"]} == {"P000@x1.5"}


@pytest.mark.parametrize("mode", ["BE", "SAE"])
def test_minibatch_layout(fed_pool, mode):
    cfg = _small(mode)
    batch = build_minibatch(fed_pool, cfg, np.random.default_rng(0), threads=2)
    assert batch.patches.shape == (12, 1, 16, 16)
    assert batch.patches.dtype == np.float32
    assert 0.0 <= batch.patches.min() <= batch.patches.max() <= 1.0
    assert sorted(set(batch.product_ids)) == ["P000", "P001"]
    assert batch.labels.trace() == 0

    same = np.equal.outer(batch.product_ids, batch.product_ids)
    np.fill_diagonal(same, False)
    if mode == "SAE":
        np.testing.assert_array_equal(batch.labels.astype(bool), same)
    else:
        cells = np.equal.outer(batch.cells, batch.cells)
        np.testing.assert_array_equal(batch.labels.astype(bool), same & cells)
    assert len(batch.samples()) == 12


def test_minibatch_is_deterministic(fed_pool):
    cfg = _small()
    a = build_minibatch(fed_pool, cfg, np.random.default_rng(5))
    b = build_minibatch(fed_pool, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a.patches, b.patches)
    assert a.product_ids == b.product_ids


def test_minibatch_capacity(fed_pool):
    with pytest.raises(CapacityError):
        build_minibatch(fed_pool, _small(patches_per_tile=5), np.random.default_rng(0))
    with pytest.raises(CapacityError):
        build_minibatch(fed_pool, _small(batch_products=3), np.random.default_rng(0))


def test_validation_split(fed_pool):
    train, val = split_for_validation(fed_pool, "product")
    assert (sorted(train), sorted(val)) == (["P000"], ["P001"])
    train, val = split_for_validation(fed_pool, "tile")
    assert sorted(train) == sorted(val) == ["P000", "P001"]
    for pid in fed_pool:
        assert len(train[pid]) + len(val[pid]) == len(fed_pool[pid])
        assert not set(train[pid]) & set(val[pid])
    with pytest.raises(ConfigurationError):
        split_for_validation({"P000": fed_pool["P000"]}, "product")


@pytest.mark.parametrize("mode", ["BE", "SAE", "ASAE"])
def test_short_training_run(fed, mode, tmp_path):
    result = train_extractor(fed, _small(mode))

    assert 1 <= len(result.history) <= 2
    assert result.best_epoch in {0, 1}
    assert np.isfinite(result.best_val_loss)
    extractor = result.extractor
    assert extractor.extractor_id == default_extractor_id(_small(mode))

    tile_path = fed.resolve(fed.pristine_tiles[0])
    source = TileSource(tile_path, "P000")
    fp = extractor.extract(load_source(source))
    assert fp.values.shape == (32, 32)
    assert fp.extractor_id == extractor.extractor_id

    extractor.save(tmp_path / "fp")
    loaded = FingerprintExtractor.load(tmp_path / "fp")
    assert loaded.config == extractor.config
    np.testing.assert_array_equal(loaded.extract(load_source(source)).values, fp.values)


def test_training_is_reproducible(fed):
    a = train_extractor(fed, _small(max_epochs=1))
    b = train_extractor(fed, _small(max_epochs=1))
    assert a.history[0].val_loss == b.history[0].val_loss
    for key, value in a.extractor.network.parameters().items():
        np.testing.assert_array_equal(value, b.extractor.network.parameters()[key])


def test_training_needs_enough_products(fed_pool):
    with pytest.raises(CapacityError):
        train_extractor({"P000": fed_pool["P000"]}, _small(), val_pool={"P001": fed_pool["P001"]})


def test_load_rejects_other_models(tmp_path):
    Network(dncnn_spec(2, 2)).save(tmp_path / "m", metadata={"kind": "unet"})
    with pytest.raises(ModelError):
        FingerprintExtractor.load(tmp_path / "m")


def test_pair_separation_auc():
    ids = ["a", "a", "b", "b"]
    separated = np.array([[0.0], [0.1], [5.0], [5.2]])
    assert pair_separation_auc(separated, ids) == 1.0
    swapped = np.array([[0.0], [5.0], [0.1], [5.2]])
    # only the far cross pair (0, 3) ranks below the same-product pairs
    assert pair_separation_auc(swapped, ids) == pytest.approx(0.25)
    with pytest.raises(UndefinedMetricError):
        pair_separation_auc(separated, ["a"] * 4)


def _two_signature_pool(root) -> dict[str, list[TileSource]]:
    signatures = {
        "NEAR": ProductSignature(resample_factor=1.5, resample_kernel="nearest", quantization_step=0.05),
        "CUBE": ProductSignature(resample_factor=1.5, resample_kernel="bicubic", lowpass_sigma=0.6),
    }
    pool: dict[str, list[TileSource]] = {}
    for i, (pid, signature) in enumerate(signatures.items()):
        raster = gen_product(SceneConfig(height=320, width=320, seed=10 + i), signature, seed=20 + i)
        for k, tile in enumerate(partition_product(raster.pixels, 160, product_id=pid)):
            path = save_tile(tile, root / pid / f"tile_{k:04d}.f32")
            pool.setdefault(pid, []).append(TileSource(path, pid))
    return pool


@pytest.mark.slow
def test_desk_extractor_separates_distinct_signatures(tmp_path):
    pool = _two_signature_pool(tmp_path)
    train, held_out = split_for_validation(pool, "tile")
    cfg = ExtractorConfig.desk("SAE", seed=1)
    result = train_extractor(train, cfg, val_pool=held_out)
    report = evaluate_separation(result.extractor, held_out, rng=4, batches=4)
    assert report["positive_mean"] < report["negative_mean"]
    assert report["auc"] >= 0.95


def test_frozen_batch_loss_descends(fed):
    # one fixed mini-batch per epoch: train_loss is the loss just before each Adam step
    cfg = _small(fixed_batches=True, iters_per_epoch=1, max_epochs=10, early_stop_patience=10, lr=1e-4)
    result = train_extractor(fed, cfg)
    losses = [log.train_loss for log in result.history]
    assert len(losses) == 10
    assert all(later < earlier for earlier, later in zip(losses, losses[1:], strict=False)), losses


def test_zero_learning_rate_keeps_the_loss(fed):
    cfg = _small(fixed_batches=True, iters_per_epoch=1, max_epochs=3, lr=0.0)
    result = train_extractor(fed, cfg)
    assert len({log.train_loss for log in result.history}) == 1
    initial = Network(dncnn_spec(cfg.depth, cfg.width, cfg.seed)).parameters()
    for key, value in result.extractor.network.parameters().items():
        np.testing.assert_array_equal(value, initial[key])


def test_early_stop_after_patience(fed, monkeypatch):
    cfg = _small(max_epochs=20, early_stop_patience=3)
    # best epoch 1, then three epochs without a new best
    curve = [1.0, 0.8, 0.9, 0.85, 0.8, 0.1, 0.05]
    calls = []
    real = fingerprint_module._batch_loss

    def scripted(network, batch, mode):
        loss, grad, shape = real(network, batch, mode)
        if mode == "eval":
            loss = curve[len(calls) // cfg.val_batches]
            calls.append(loss)
        return loss, grad, shape

    monkeypatch.setattr(fingerprint_module, "_batch_loss", scripted)
    result = train_extractor(fed, cfg)
    assert result.stopped_early
    assert result.best_epoch == 1
    assert result.best_val_loss == pytest.approx(0.8)
    assert len(result.history) == result.best_epoch + cfg.early_stop_patience + 1
    assert [log.val_loss for log in result.history] == pytest.approx(curve[:5])
