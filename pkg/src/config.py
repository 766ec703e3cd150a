import os
from pathlib import Path
from typing import Final

BASE_DIR: Final[Path] = Path(__file__).resolve().parent.parent
# SARSPLICE_HOME 可把所有产物目录整体迁移（例如放到大容量磁盘）
HOME_DIR: Final[Path] = Path(os.getenv("SARSPLICE_HOME") or BASE_DIR).expanduser().resolve()
DATA_DIR: Final[Path] = HOME_DIR / "data"
PRODUCTS_DIR: Final[Path] = DATA_DIR / "products"
DATASETS_DIR: Final[Path] = DATA_DIR / "datasets"
MODELS_DIR: Final[Path] = HOME_DIR / "models"
REPORTS_DIR: Final[Path] = HOME_DIR / "reports"
LOG_DIR: Final[Path] = HOME_DIR / "logs"

DEFAULT_SETTINGS: Final[dict[str, str]] = {
    "workers": "1",
    "tile_side": "1024",
    "desk_tile_side": "256",
    "patch_side": "8",  # 掩膜估计的非重叠块边长
    "min_side": "128",  # 拼接区域最小边长
    "clusters": "7",
    "tau": "0.5",
    "kmeans_restarts": "5",
    "kmeans_max_iter": "300",
    "gmm_max_iter": "200",
    "gmm_tol": "1e-6",
    "gmm_var_floor": "1e-6",
    "good_iou": "0.5",
    "log_max_bytes": "5242880",
    "log_backup_count": "10",
}


def setting(key: str, default: str | None = None) -> str:
    """Look up a default, letting ``SARSPLICE_<KEY>`` override it from the environment."""
    env_value = os.getenv(f"SARSPLICE_{key.upper()}")
    if env_value is not None and env_value.strip():
        return env_value.strip()
    value = DEFAULT_SETTINGS.get(key, default)
    if value is None:
        raise KeyError(key)
    return value


def ensure_app_dirs() -> None:
    for directory in (DATA_DIR, PRODUCTS_DIR, DATASETS_DIR, MODELS_DIR, REPORTS_DIR, LOG_DIR):
        directory.mkdir(parents=True, exist_ok=True)
