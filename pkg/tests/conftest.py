import os
import tempfile
from pathlib import Path

# 在导入 src 之前设置，所有产物目录都落在临时目录
os.environ.setdefault("SARSPLICE_HOME", tempfile.mkdtemp(prefix="sarsplice-tests-"))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from src.data.models import Fingerprint, TamperMask, Tile  # noqa: E402
from src.data.storage import load_registry  # noqa: E402
from src.services.synthgrd import generate_pool  # noqa: E402


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_tile(rng):
    def factory(height: int = 32, width: int = 32, product_id: str = "P000", scale: float = 10.0) -> Tile:
        return Tile(rng.uniform(0.0, scale, size=(height, width)).astype(np.float32), product_id)

    return factory


@pytest.fixture
def square_mask():
    def factory(shape: tuple[int, int], row: int, col: int, height: int, width: int) -> TamperMask:
        bits = np.zeros(shape, dtype=np.uint8)
        bits[row : row + height, col : col + width] = 1
        return TamperMask(bits)

    return factory


@pytest.fixture(scope="session")
def product_pool(tmp_path_factory) -> Path:
    """Four small products (catalog signatures 0-3) tiled at side 32; returns the products.json path."""
    out = tmp_path_factory.mktemp("products")
    generate_pool(4, height=128, width=128, tile_side=32, seed=7, out_dir=out)
    return out / "products.json"


@pytest.fixture(scope="session")
def registry(product_pool):
    return load_registry(product_pool)


@pytest.fixture
def blob_fingerprint():
    """64x64 map whose 16x16 top-left square carries a very different level from the background."""

    def factory(noise: float = 0.05, seed: int = 0) -> tuple[Fingerprint, TamperMask]:
        gen = np.random.default_rng(seed)
        values = gen.normal(0.0, noise, size=(64, 64))
        bits = np.zeros((64, 64), dtype=np.uint8)
        bits[8:24, 16:32] = 1
        values[bits == 1] += 3.0
        return Fingerprint(values, "test-fp"), TamperMask(bits)

    return factory
