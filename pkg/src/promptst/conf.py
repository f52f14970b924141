"""
Process-level settings.

Values come from ``PROMPTST_*`` environment variables and fall back to the
defaults below, e.g.::

    PROMPTST_LOG_LEVEL=DEBUG promptst pretrain --data city.stgrid --out base.ckpt
"""
import logging
import os
import tempfile
from dataclasses import dataclass


DEFAULT_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _env_flag(name: str, default: bool) -> bool:
    value = os.environ.get(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


@dataclass(frozen=True)
class Settings:
    log_level: str = "INFO"
    log_format: str = DEFAULT_LOG_FORMAT
    memory_profile: bool = False
    memory_report_dir: str = tempfile.gettempdir()
    clip_normalized: bool = False

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            log_level=os.environ.get("PROMPTST_LOG_LEVEL", "INFO").upper(),
            log_format=os.environ.get("PROMPTST_LOG_FORMAT", DEFAULT_LOG_FORMAT),
            memory_profile=_env_flag("PROMPTST_MEMORY_PROFILE", False),
            memory_report_dir=os.environ.get("PROMPTST_MEMORY_REPORT_DIR", tempfile.gettempdir()),
            clip_normalized=_env_flag("PROMPTST_CLIP_NORMALIZED", False),
        )


def get_settings() -> Settings:
    """Read settings from the environment on every call (cheap, keeps tests simple)"""
    return Settings.from_env()


def configure_logging(settings: Settings) -> None:
    """Configure the root logger; only the CLI calls this"""
    level = getattr(logging, settings.log_level, logging.INFO)
    logging.basicConfig(level=level, format=settings.log_format)
