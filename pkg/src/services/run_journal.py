"""
Run journal: one structured line per pipeline operation on the ``run`` logger.
"""

import logging
from datetime import datetime
from enum import Enum
from typing import Any


class OperationType(str, Enum):
    SYNTHESIZE = "synthesize"
    SPLICE = "splice"
    TRAIN = "train"
    EXTRACT = "extract"
    ESTIMATE = "estimate"
    EVALUATE = "evaluate"


class EntityType(str, Enum):
    PRODUCT_POOL = "product_pool"
    DATASET = "dataset"
    EXTRACTOR = "extractor"
    UNET = "unet"
    FINGERPRINT = "fingerprint"
    MASK = "mask"
    REPORT = "report"


class RunJournal:
    def __init__(self, logger_name: str = "run"):
        self.logger = logging.getLogger(logger_name)
        self.logger.setLevel(logging.INFO)

    def log_operation(
        self,
        operation: OperationType | str,
        entity: EntityType | str,
        entity_id: int | str,
        details: dict[str, Any] | None = None,
        success: bool = True,
        error: str | None = None,
    ) -> None:
        details = details or {}
        timestamp = datetime.now().isoformat()

        op_str = operation.value if isinstance(operation, OperationType) else operation
        entity_str = entity.value if isinstance(entity, EntityType) else entity
        message = f"RUN: {op_str} {entity_str}#{entity_id}"

        if success:
            self.logger.info("%s | time=%s | details=%s", message, timestamp, details)
        else:
            self.logger.error("%s | time=%s | error=%s | details=%s", message, timestamp, error, details)

    def log_training(self, entity: EntityType | str, model_dir: str, epochs: int, best_epoch: int, best_loss: float):
        self.log_operation(
            OperationType.TRAIN,
            entity,
            model_dir,
            {"epochs": epochs, "best_epoch": best_epoch, "best_val_loss": round(best_loss, 6)},
        )

    def log_evaluation(self, report_dir: str, records: int, rows: int, failures: int, exit_code: int) -> None:
        """Evaluations with failures are logged at WARNING so they stand out in pipeline.log."""
        timestamp = datetime.now().isoformat()
        level = logging.WARNING if failures else logging.INFO
        self.logger.log(
            level,
            "RUN_EVAL: %s | time=%s | records=%s | rows=%s | failures=%s | exit=%s",
            report_dir,
            timestamp,
            records,
            rows,
            failures,
            exit_code,
        )

    def log_performance_issue(self, operation: str, duration_ms: float, threshold_ms: float = 10_000) -> None:
        if duration_ms > threshold_ms:
            self.logger.warning(
                "RUN_SLOW: %s | duration=%.2fms | threshold=%sms",
                operation,
                duration_ms,
                threshold_ms,
            )


_run_journal: RunJournal | None = None


def get_run_journal() -> RunJournal:
    global _run_journal
    if _run_journal is None:
        _run_journal = RunJournal()
    return _run_journal
