from dataclasses import dataclass

import numpy as np
import pytest

from src.data.models import Fingerprint, NormalizedTile, ProductSignature
from src.data.storage import load_registry
from src.services.experiment import (
    EXIT_NOTHING_EVALUATED,
    EXIT_OK,
    EXIT_PARTIAL_FAILURE,
    ResidualEnergyExtractor,
    extract_pairs,
    run_experiment,
)
from src.services.editops import SD2_OPERATIONS
from src.services.fingerprint import ExtractorConfig, train_extractor
from src.services.metrics import compare_extractors
from src.services.splicer import DatasetBlueprint, build_dataset
from src.services.synthgrd import generate_pool


@pytest.fixture(scope="module")
def sd2(registry, tmp_path_factory):
    blueprint = DatasetBlueprint.sd2(per_op=1, seed=5, max_sides=(16,), min_side=8)
    return build_dataset(blueprint, registry, tmp_path_factory.mktemp("sd2"))


def test_residual_energy_extractor():
    flat = NormalizedTile(np.full((32, 32), 0.5), 0.0, 1.0)
    noisy = NormalizedTile(np.random.default_rng(0).uniform(size=(32, 32)), 0.0, 1.0)
    extractor = ResidualEnergyExtractor()
    assert extractor.extract(flat).values.max() < extractor.extract(noisy).values.min()
    assert extractor.extract(noisy).extractor_id == "residual-energy"


def test_clustering_methods_score_every_record(sd2, tmp_path):
    outcome = run_experiment(sd2, [ResidualEnergyExtractor()], ["kmeans", "gmm"], tmp_path / "report", seed=1)

    assert outcome.records == 7
    assert outcome.exit_code == EXIT_OK
    detail = outcome.report.detail
    assert len(detail) == 14
    assert detail["error"].isna().all()
    assert detail["iou"].between(0.0, 1.0).all()
    assert (detail["tp"] + detail["fp"] + detail["tn"] + detail["fn"] == 32 * 32).all()
    assert set(detail["scenario"]) <= {"inter", "intra"}
    assert (tmp_path / "report" / "report.csv").exists()
    assert set(outcome.paths) == {"report", "detail", "best"}


def test_missing_unet_is_a_partial_failure(sd2):
    outcome = run_experiment(sd2, [ResidualEnergyExtractor()], ["gmm", "unet"])
    assert outcome.exit_code == EXIT_PARTIAL_FAILURE
    assert outcome.report.failures == 7
    errors = outcome.report.detail["error"].dropna()
    assert errors.str.startswith("model_error:").all()
    assert outcome.paths == {}
    assert set(outcome.report.summary()["method"]) == {"gmm"}


def test_nothing_to_evaluate(sd2):
    empty = sd2.model_copy(update={"records": []}).bind(sd2.base_dir)
    outcome = run_experiment(empty, [ResidualEnergyExtractor()], ["gmm"])
    assert outcome.exit_code == EXIT_NOTHING_EVALUATED
    assert outcome.records == 0


def test_unreadable_record_is_reported(registry, tmp_path):
    manifest = build_dataset(DatasetBlueprint.sd2(per_op=1, seed=6, max_sides=(16,), min_side=8), registry, tmp_path)
    manifest.resolve(manifest.records[0].spliced_path).unlink()
    outcome = run_experiment(manifest, [ResidualEnergyExtractor()], ["kmeans"])
    assert outcome.exit_code == EXIT_PARTIAL_FAILURE
    failed = outcome.report.detail[outcome.report.detail["error"].notna()]
    assert failed["index"].tolist() == [manifest.records[0].index]
    assert failed["error"].iloc[0].startswith("load:")


def test_workers_do_not_change_results(sd2):
    inline = run_experiment(sd2, [ResidualEnergyExtractor()], ["kmeans"], seed=3, workers=1)
    pooled = run_experiment(sd2, [ResidualEnergyExtractor()], ["kmeans"], seed=3, workers=2)
    assert inline.report.detail.equals(pooled.report.detail)


def test_extract_pairs(sd2):
    pairs = extract_pairs(sd2, ResidualEnergyExtractor())
    assert len(pairs) == len(sd2.records)
    for fp, mask in pairs:
        assert fp.shape == mask.shape == (32, 32)
        assert mask.area > 0


@pytest.mark.slow
def test_blurred_splices_are_found_without_learning(tmp_path):
    products = tmp_path / "products"
    generate_pool(4, height=256, width=256, tile_side=128, seed=11, out_dir=products)
    registry = load_registry(products / "products.json")
    blueprint = DatasetBlueprint(
        name="custom",
        operations=["average_blur"],
        per_op=50,
        max_sides=[64],
        min_side=32,
        modes=["inter"],
        split="test",
        seed=3,
    )
    manifest = build_dataset(blueprint, registry, tmp_path / "datasets", workers=2)
    outcome = run_experiment(manifest, [ResidualEnergyExtractor()], ["gmm"], workers=2, seed=0)

    assert outcome.exit_code == EXIT_OK
    summary = outcome.report.summary().iloc[0]
    assert summary["n"] == 50
    assert summary["iou"] >= 0.7
    assert summary["ba"] >= 0.85


@dataclass
class _FailsOnce:
    """Residual extractor that returns a non-finite map on its ``fail_at``-th call."""

    fail_at: int
    extractor_id: str = "residual-energy"
    calls: int = 0

    def extract(self, tile: NormalizedTile) -> Fingerprint:
        self.calls += 1
        fp = ResidualEnergyExtractor().extract(tile)
        if self.calls == self.fail_at:
            return Fingerprint(np.full(fp.shape, np.nan), self.extractor_id)
        return fp


def test_extraction_failure_is_one_record_row(sd2):
    outcome = run_experiment(sd2, [_FailsOnce(fail_at=3)], ["kmeans", "gmm"], seed=1)

    assert outcome.exit_code == EXIT_PARTIAL_FAILURE
    detail = outcome.report.detail
    failed = detail[detail["error"].notna()]
    assert failed["index"].tolist() == [sd2.records[2].index] * 2
    assert failed["error"].str.startswith("extract: validation_error:").all()
    assert len(outcome.report.scored) == 12
    assert set(outcome.report.summary()["method"]) == {"kmeans", "gmm"}


_BLUR_AND_NOISE = ("gaussian_noise", "laplacian_noise", "average_blur", "median_blur", "speckle_noise")


@pytest.fixture(scope="module")
def desk_pipeline(tmp_path_factory):
    """Two signature families on both sides of the FED/SD2 product split, SAE and BE desk extractors."""
    root = tmp_path_factory.mktemp("desk")
    near = ProductSignature(resample_factor=1.5, resample_kernel="nearest", quantization_step=0.05)
    cube = ProductSignature(resample_factor=1.5, resample_kernel="bicubic", lowpass_sigma=0.6)
    registry = generate_pool(
        4, height=768, width=768, tile_side=128, seed=21, out_dir=root / "products", signatures=[near, cube] * 2
    )
    fed = build_dataset(DatasetBlueprint.fed(seed=1), registry, root / "fed")
    common = {"name": "SD2", "catalog": "SD2", "max_sides": [64], "min_side": 48, "split": "test", "seed": 2}
    inter = build_dataset(
        DatasetBlueprint(operations=list(SD2_OPERATIONS), per_op=20, modes=["inter"], **common),
        registry,
        root / "inter",
    )
    intra = build_dataset(
        DatasetBlueprint(operations=["none"], per_op=20, modes=["intra"], **common), registry, root / "intra"
    )
    sae = train_extractor(fed, ExtractorConfig.desk("SAE", seed=1)).extractor
    be = train_extractor(fed, ExtractorConfig.desk("BE", seed=1)).extractor
    report = run_experiment(inter, [sae, be], ["gmm"], seed=0).report
    return {"sae": sae, "be": be, "report": report, "intra": intra}


@pytest.mark.slow
def test_desk_pipeline_localizes_edited_splices(desk_pipeline):
    scored = desk_pipeline["report"].scored
    sae_id = desk_pipeline["sae"].extractor_id
    edited = scored[(scored["extractor"] == sae_id) & scored["operation"].isin(_BLUR_AND_NOISE)]
    assert len(edited) >= 0.9 * 20 * len(_BLUR_AND_NOISE)
    assert edited["ba"].mean() >= 0.75
    assert edited["iou"].mean() >= 0.4


@pytest.mark.slow
def test_unedited_intra_splices_are_a_coin_toss(desk_pipeline):
    outcome = run_experiment(desk_pipeline["intra"], [desk_pipeline["sae"]], ["gmm"], seed=0)
    scored = outcome.report.scored
    assert len(scored) >= 18
    assert abs(scored["ba"].mean() - 0.5) <= 0.05


@pytest.mark.slow
def test_relaxed_labels_beat_position_labels(desk_pipeline):
    comparison = compare_extractors(
        desk_pipeline["report"], desk_pipeline["sae"].extractor_id, desk_pipeline["be"].extractor_id, metric="ba"
    )
    assert comparison.total == 6
    assert comparison.wins >= 4, f"SAE wins on {comparison.operations}"
