"""
End-to-end evaluation: fingerprint every spliced tile of a manifest, estimate
masks with each requested method and score them against ground truth.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from scipy import ndimage

from ..data.models import DatasetManifest, Fingerprint, NormalizedTile, SpliceRecord, TamperMask, Tile
from ..data.storage import load_mask, load_tile
from ..errors import ToolkitError
from ..helpers import MaskMethod, make_rng
from .maskest import DEFAULT_TAU, UNetEstimator, estimate_mask
from .metrics import EvalReport, balanced_accuracy, confusion, iou
from .raster import normalize
from .run_journal import get_run_journal
from .synthgrd import highpass_residual

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOTHING_EVALUATED = 2
EXIT_PARTIAL_FAILURE = 3


class Extractor(Protocol):
    extractor_id: str

    def extract(self, tile: NormalizedTile | Tile) -> Fingerprint: ...


@dataclass
class ResidualEnergyExtractor:
    """Training-free stand-in: log of the local high-pass residual energy."""

    window: int = 8
    extractor_id: str = "residual-energy"

    def extract(self, tile: NormalizedTile | Tile) -> Fingerprint:
        normalized = normalize(tile) if isinstance(tile, Tile) else tile
        energy = ndimage.uniform_filter(highpass_residual(normalized.pixels) ** 2, size=self.window, mode="reflect")
        return Fingerprint(np.log(energy + 1e-8), self.extractor_id)


@dataclass
class ExperimentOutcome:
    report: EvalReport
    records: int
    exit_code: int
    paths: dict[str, Path]


@dataclass(frozen=True)
class _EvalContext:
    base_dir: Path
    extractors: tuple[Any, ...]
    unets: dict[str, UNetEstimator]
    methods: tuple[MaskMethod, ...]
    seed: int
    tau: float


_worker_context: _EvalContext | None = None


def _init_worker(context: _EvalContext) -> None:
    global _worker_context
    _worker_context = context


def _row(record: SpliceRecord, method: str, extractor_id: str, **values: Any) -> dict[str, Any]:
    base = {
        "index": record.index,
        "operation": record.operation,
        "scenario": record.mode,
        "method": method,
        "extractor": extractor_id,
        "iou": None,
        "ba": None,
        "tp": None,
        "fp": None,
        "tn": None,
        "fn": None,
        "error": None,
    }
    base.update(values)
    return base


def evaluate_record(record: SpliceRecord, context: _EvalContext) -> list[dict[str, Any]]:
    """Score one record for every extractor x method pair; failures become rows with ``error`` set."""
    rows: list[dict[str, Any]] = []
    try:
        tile = normalize(load_tile(context.base_dir / record.spliced_path))
        truth = load_mask(context.base_dir / record.mask_path)
    except (OSError, ToolkitError) as exc:
        logger.warning("record %s: cannot load inputs: %s", record.index, exc)
        return [
            _row(record, method, ex.extractor_id, error=f"load: {exc}")
            for ex in context.extractors
            for method in context.methods
        ]

    for extractor in context.extractors:
        try:
            fp = extractor.extract(tile)
        except (ToolkitError, ValueError) as exc:
            code = exc.code if isinstance(exc, ToolkitError) else "extract_error"
            logger.warning("record %s (%s): extraction failed: %s", record.index, extractor.extractor_id, exc)
            rows.extend(
                _row(record, method, extractor.extractor_id, error=f"extract: {code}: {exc}")
                for method in context.methods
            )
            continue
        for method in context.methods:
            rng = make_rng(context.seed, record.index)
            try:
                estimate = estimate_mask(
                    method, fp, rng, model=context.unets.get(extractor.extractor_id), tau=context.tau
                )
                counts = confusion(estimate.mask, truth)
                rows.append(
                    _row(
                        record,
                        method,
                        extractor.extractor_id,
                        iou=iou(counts),
                        ba=balanced_accuracy(counts),
                        tp=counts.tp,
                        fp=counts.fp,
                        tn=counts.tn,
                        fn=counts.fn,
                    )
                )
            except ToolkitError as exc:
                logger.warning("record %s (%s/%s): %s", record.index, extractor.extractor_id, method, exc)
                rows.append(_row(record, method, extractor.extractor_id, error=f"{exc.code}: {exc}"))
    return rows


def _evaluate_in_worker(record: SpliceRecord) -> list[dict[str, Any]]:
    assert _worker_context is not None
    return evaluate_record(record, _worker_context)


def run_experiment(
    manifest: DatasetManifest,
    extractors: Sequence[Extractor],
    methods: Sequence[MaskMethod],
    out_dir: Path | str | None = None,
    *,
    unets: dict[str, UNetEstimator] | None = None,
    workers: int = 1,
    seed: int = 0,
    tau: float = DEFAULT_TAU,
) -> ExperimentOutcome:
    """
    Evaluate every record, aggregate and (when ``out_dir`` is given) write report files.

    Exit codes: 0 all rows scored, 2 nothing scored, 3 some rows failed.
    """
    started = time.perf_counter()
    context = _EvalContext(
        base_dir=manifest.base_dir,
        extractors=tuple(extractors),
        unets=dict(unets or {}),
        methods=tuple(methods),
        seed=seed,
        tau=tau,
    )
    records = sorted(manifest.records, key=lambda r: r.index)
    rows: list[dict[str, Any]] = []
    if workers <= 1 or len(records) < 2:
        for record in records:
            rows.extend(evaluate_record(record, context))
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(context,)) as pool:
            chunksize = max(1, len(records) // (workers * 4))
            for record_rows in pool.map(_evaluate_in_worker, records, chunksize=chunksize):
                rows.extend(record_rows)

    report = EvalReport.from_rows(rows)
    scored = len(report.scored)
    if scored == 0:
        exit_code = EXIT_NOTHING_EVALUATED
    elif report.failures:
        exit_code = EXIT_PARTIAL_FAILURE
    else:
        exit_code = EXIT_OK
    if report.failures:
        logger.warning("%s of %s rows failed and are excluded from the means", report.failures, len(rows))

    paths = report.write(out_dir) if out_dir is not None else {}
    journal = get_run_journal()
    journal.log_evaluation(str(out_dir or "-"), len(records), len(rows), report.failures, exit_code)
    journal.log_performance_issue("evaluate", (time.perf_counter() - started) * 1000.0, threshold_ms=20 * 60 * 1000)
    return ExperimentOutcome(report, len(records), exit_code, paths)


def extract_pair(record: SpliceRecord, base_dir: Path, extractor: Extractor) -> tuple[Fingerprint, TamperMask]:
    tile = load_tile(base_dir / record.spliced_path)
    return extractor.extract(tile), load_mask(base_dir / record.mask_path)


def extract_pairs(manifest: DatasetManifest, extractor: Extractor) -> list[tuple[Fingerprint, TamperMask]]:
    """Fingerprints and truth masks of every record, the U-Net training set."""
    return [extract_pair(r, manifest.base_dir, extractor) for r in sorted(manifest.records, key=lambda r: r.index)]
