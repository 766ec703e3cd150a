from dataclasses import dataclass, field

from .config import DEFAULT_SETTINGS, ensure_app_dirs, setting
from .helpers import safe_int, to_bool
from .logger import configure_logging
from .services.run_journal import RunJournal, get_run_journal


@dataclass
class AppContext:
    journal: RunJournal
    workers: int
    debug: bool
    settings: dict[str, str] = field(default_factory=dict)

    def get(self, key: str, default: str = "") -> str:
        return self.settings.get(key, default)


def bootstrap(debug: bool = False, *, workers: int | None = None) -> AppContext:
    debug = debug or to_bool(setting("debug", "false"))
    configure_logging(debug_enabled=debug)
    ensure_app_dirs()

    settings = {key: setting(key) for key in DEFAULT_SETTINGS}
    resolved_workers = workers if workers is not None else safe_int(settings["workers"], 1, min_value=1, max_value=64)

    return AppContext(
        journal=get_run_journal(),
        workers=max(1, resolved_workers),
        debug=debug,
        settings=settings,
    )
