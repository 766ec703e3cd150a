"""
Grid validators for data integrity and consistency.
"""

from typing import Any

import numpy as np

from ..errors import SizingError, ValidationError


class GridValidator:
    """Centralized validators for the 2-D grids that flow through the pipeline."""

    @staticmethod
    def validate_shape(grid: np.ndarray) -> tuple[bool, str]:
        """
        Validate that a grid is 2-D with at least one pixel per axis.

        Returns:
            (is_valid, error_message)
        """
        if grid.ndim != 2:
            return False, f"grid must be 2-D, got {grid.ndim} axes"
        if grid.shape[0] < 1 or grid.shape[1] < 1:
            return False, f"grid must have height >= 1 and width >= 1, got {grid.shape}"
        return True, ""

    @staticmethod
    def validate_finite(grid: np.ndarray) -> tuple[bool, str]:
        if not np.all(np.isfinite(grid)):
            bad = int(np.count_nonzero(~np.isfinite(grid)))
            return False, f"grid contains {bad} non-finite values"
        return True, ""

    @staticmethod
    def validate_non_negative(grid: np.ndarray) -> tuple[bool, str]:
        if grid.size and float(np.min(grid)) < 0:
            return False, f"amplitudes must be >= 0, min is {float(np.min(grid))}"
        return True, ""

    @staticmethod
    def validate_unit_range(grid: np.ndarray) -> tuple[bool, str]:
        if grid.size and (float(np.min(grid)) < 0.0 or float(np.max(grid)) > 1.0):
            return False, "normalized pixels must lie in [0, 1]"
        return True, ""

    @staticmethod
    def validate_binary(grid: np.ndarray) -> tuple[bool, str]:
        if grid.size and not np.all((grid == 0) | (grid == 1)):
            return False, "mask elements must be exactly 0 or 1"
        return True, ""

    @staticmethod
    def validate_identifier(value: str, field: str) -> tuple[bool, str]:
        if not isinstance(value, str) or not value.strip():
            return False, f"{field} must be a non-empty string"
        return True, ""

    @staticmethod
    def validate_same_shape(a: Any, b: Any, what: str = "grids") -> tuple[bool, str]:
        shape_a = tuple(getattr(a, "shape", ()))
        shape_b = tuple(getattr(b, "shape", ()))
        if shape_a != shape_b:
            return False, f"{what} differ in size: {shape_a} vs {shape_b}"
        return True, ""

    @staticmethod
    def validate_amplitude_grid(grid: np.ndarray, product_id: str) -> list[str]:
        """
        Validate a complete tile payload.

        Returns:
            List of error messages (empty if valid)
        """
        errors: list[str] = []
        for check in (GridValidator.validate_finite, GridValidator.validate_non_negative):
            valid, msg = check(grid)
            if not valid:
                errors.append(msg)
        valid, msg = GridValidator.validate_identifier(product_id, "product_id")
        if not valid:
            errors.append(msg)
        return errors


def require_shape(grid: np.ndarray) -> None:
    valid, msg = GridValidator.validate_shape(grid)
    if not valid:
        raise SizingError(msg)


def raise_on_errors(errors: list[str], *, context: str = "") -> None:
    if errors:
        prefix = f"{context}: " if context else ""
        raise ValidationError(prefix + "; ".join(errors))


def ensure(check: tuple[bool, str], *, context: str = "") -> None:
    valid, msg = check
    if not valid:
        raise_on_errors([msg], context=context)
