"""
Pixel-level scoring of estimated masks and aggregation into per-operation tables.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from .. import config
from ..data.models import TamperMask
from ..errors import UndefinedMetricError, ValidationError
from .validators import GridValidator, ensure

logger = logging.getLogger(__name__)

GOOD_IOU = float(config.setting("good_iou"))
GROUP_KEYS = ["operation", "scenario", "method", "extractor"]
DETAIL_COLUMNS = [
    "index", "operation", "scenario", "method", "extractor", "iou", "ba", "tp", "fp", "tn", "fn", "error",
]
Metric = Literal["iou", "ba"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _bits(mask: TamperMask | np.ndarray) -> np.ndarray:
    return mask.bits if isinstance(mask, TamperMask) else np.asarray(mask)


def confusion(est: TamperMask | np.ndarray, truth: TamperMask | np.ndarray) -> ConfusionCounts:
    e, t = _bits(est), _bits(truth)
    ensure(GridValidator.validate_same_shape(e, t, "estimate and truth masks"), context="confusion")
    # 0 = tn, 1 = fp, 2 = fn, 3 = tp
    counts = np.bincount((2 * (t.ravel() != 0) + (e.ravel() != 0)).astype(np.int64), minlength=4)
    return ConfusionCounts(tp=int(counts[3]), fp=int(counts[1]), tn=int(counts[0]), fn=int(counts[2]))


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: truth has no spliced pixels")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined: truth has no pristine pixels")
    return c.tn / (c.tn + c.fp)


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        raise UndefinedMetricError("precision undefined: estimate has no spliced pixels")
    return c.tp / (c.tp + c.fp)


def balanced_accuracy(c: ConfusionCounts) -> float:
    return 0.5 * (sensitivity(c) + specificity(c))


def iou(c: ConfusionCounts) -> float:
    union = c.tp + c.fp + c.fn
    if union == 0:
        raise UndefinedMetricError("IoU undefined: both masks are empty")
    return c.tp / union


@dataclass
class EvalReport:
    """Per-record detail rows plus the grouped means derived from them."""

    detail: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=DETAIL_COLUMNS))

    @classmethod
    def from_rows(cls, rows: list[dict]) -> EvalReport:
        frame = pd.DataFrame(rows, columns=DETAIL_COLUMNS)
        if not frame.empty:
            frame = frame.sort_values(["index", "method", "extractor"], kind="stable").reset_index(drop=True)
        return cls(frame)

    @property
    def scored(self) -> pd.DataFrame:
        return self.detail[self.detail["error"].isna()] if not self.detail.empty else self.detail

    @property
    def failures(self) -> int:
        return int(self.detail["error"].notna().sum()) if not self.detail.empty else 0

    def summary(self) -> pd.DataFrame:
        scored = self.scored
        if scored.empty:
            return pd.DataFrame(columns=[*GROUP_KEYS, "iou", "ba", "n"])
        grouped = scored.astype({"iou": float, "ba": float}).groupby(GROUP_KEYS, sort=True)
        out = grouped.agg(iou=("iou", "mean"), ba=("ba", "mean"), n=("iou", "size")).reset_index()
        return out[[*GROUP_KEYS, "iou", "ba", "n"]]

    def best_per_operation(self, metric: Metric = "iou") -> pd.DataFrame:
        """Best method for each (operation, scenario, extractor) cell by ``metric``."""
        summary = self.summary()
        if summary.empty:
            return summary
        keys = ["operation", "scenario", "extractor"]
        idx = summary.groupby(keys, sort=True)[metric].idxmax()
        best = summary.loc[idx].reset_index(drop=True)
        best.insert(len(keys) + 1, "metric", metric)
        return best

    def good_localization_rate(self, threshold: float = GOOD_IOU) -> pd.DataFrame:
        scored = self.scored
        if scored.empty:
            return pd.DataFrame(columns=[*GROUP_KEYS, "good_rate"])
        flags = scored.assign(good=scored["iou"].astype(float) >= threshold)
        return flags.groupby(GROUP_KEYS, sort=True)["good"].mean().rename("good_rate").reset_index()

    def write(self, out_dir: Path | str) -> dict[str, Path]:
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": target / "report.csv",
            "detail": target / "detail.json",
            "best": target / "best.csv",
        }
        summary = self.summary()
        summary.to_csv(paths["report"], index=False, float_format="%.6f")
        records = json.loads(self.detail.to_json(orient="records"))
        paths["detail"].write_text(json.dumps(records, indent=2), encoding="utf-8")
        best = pd.concat([self.best_per_operation("iou"), self.best_per_operation("ba")], ignore_index=True)
        best.to_csv(paths["best"], index=False, float_format="%.6f")
        logger.info("Wrote report (%s cells, %s detail rows) to %s", len(summary), len(self.detail), target)
        return paths


@dataclass(frozen=True)
class ExtractorComparison:
    wins: int
    total: int
    operations: list[str]


def compare_extractors(
    report: EvalReport,
    a: str,
    b: str,
    metric: Metric = "ba",
    *,
    scenario: str = "inter",
    method: str = "gmm",
    exclude: tuple[str, ...] = ("none",),
) -> ExtractorComparison:
    """Count operations where extractor ``a`` strictly beats ``b`` on the mean ``metric``."""
    summary = report.summary()
    cell = summary[(summary["scenario"] == scenario) & (summary["method"] == method)]
    table = cell.pivot_table(index="operation", columns="extractor", values=metric)
    if a not in table.columns or b not in table.columns:
        raise ValidationError(f"report lacks extractor '{a}' or '{b}' for {scenario}/{method}")
    table = table.drop(index=[op for op in exclude if op in table.index]).dropna(subset=[a, b])
    winners = table.index[table[a] > table[b]].tolist()
    return ExtractorComparison(wins=len(winners), total=len(table), operations=sorted(winners))
