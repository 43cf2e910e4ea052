"""Shared process settings for the switching-control solver and CLI."""
from __future__ import annotations
import os
from dataclasses import dataclass, field


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        return -1


@dataclass
class Settings:
    output_dir: str = field(default_factory=lambda: os.environ.get("SWITCHING_OUTPUT_DIR", "results"))
    log_level: str = field(default_factory=lambda: os.environ.get("SWITCHING_LOG_LEVEL", "INFO").upper())
    log_format: str = field(default_factory=lambda: os.environ.get("SWITCHING_LOG_FORMAT", "json").lower())
    max_vertices: int = field(default_factory=lambda: _env_int("SWITCHING_MAX_VERTICES", 250_000))
    sweep_workers: int = field(default_factory=lambda: _env_int("SWITCHING_SWEEP_WORKERS", 1))

    def assert_valid(self) -> bool:
        invalid = []
        if self.log_level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            invalid.append("SWITCHING_LOG_LEVEL")
        if self.log_format not in {"json", "text"}:
            invalid.append("SWITCHING_LOG_FORMAT")
        if self.max_vertices <= 0:
            invalid.append("SWITCHING_MAX_VERTICES")
        if self.sweep_workers <= 0:
            invalid.append("SWITCHING_SWEEP_WORKERS")
        if invalid:
            raise RuntimeError(f"Invalid environment vars: {', '.join(invalid)}")
        return True


settings = Settings()
