from __future__ import annotations

import tomllib
from importlib.metadata import PackageNotFoundError, version

from .config import BASE_DIR

DISTRIBUTION = "sar-splice-forensics"


def get_app_version() -> str:
    """Installed distribution version, falling back to the source tree's pyproject.toml."""
    try:
        return version(DISTRIBUTION)
    except PackageNotFoundError:
        pass

    pyproject_path = BASE_DIR / "pyproject.toml"
    try:
        data = tomllib.loads(pyproject_path.read_text(encoding="utf-8"))
    except Exception:
        return "unknown"

    value = data.get("project", {}).get("version")
    if isinstance(value, str) and value.strip():
        return value.strip()
    return "unknown"
