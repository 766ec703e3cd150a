from __future__ import annotations

from collections.abc import Iterable
from typing import Literal, cast

import numpy as np

MaskMethod = Literal["kmeans", "gmm", "unet"]
MASK_METHODS: tuple[MaskMethod, ...] = ("kmeans", "gmm", "unet")


def to_bool(value: str | bool | None, default: bool = False) -> bool:
    if value is None:
        return default
    if isinstance(value, bool):
        return value
    return value.strip().lower() in {"1", "true", "yes", "on"}


def safe_int(value: str | None, default: int, *, min_value: int | None = None, max_value: int | None = None) -> int:
    try:
        num = int(value) if value is not None else default
    except Exception:
        num = default
    if min_value is not None:
        num = max(min_value, num)
    if max_value is not None:
        num = min(max_value, num)
    return num


def safe_float(value: str | None, default: float) -> float:
    try:
        return float(value) if value is not None else default
    except Exception:
        return default


def parse_methods(raw: str | Iterable[str] | None, default: tuple[MaskMethod, ...] = MASK_METHODS) -> list[MaskMethod]:
    """Parse ``"kmeans,gmm"`` style lists, dropping unknown names and duplicates."""
    if raw is None:
        return list(default)
    items = raw.split(",") if isinstance(raw, str) else list(raw)
    methods: list[MaskMethod] = []
    for item in items:
        name = item.strip().lower()
        if name in MASK_METHODS and name not in methods:
            methods.append(cast(MaskMethod, name))
    return methods or list(default)


def make_rng(seed: int | np.random.Generator | None, *stream: int) -> np.random.Generator:
    """Build a generator; extra ``stream`` ints derive independent per-record streams."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])
