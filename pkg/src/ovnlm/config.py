"""Configuration helpers for the OVNLM denoiser."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import os


@dataclass(frozen=True)
class Settings:
    threads: int
    log_level: str
    patch_radius: int
    varsigma: float
    iter_max: int
    eval_output_dir: str


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    return int(raw)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings(
        threads=max(0, _env_int("OVNLM_THREADS", 0)),
        log_level=os.getenv("OVNLM_LOG_LEVEL", "WARNING").upper(),
        patch_radius=_env_int("OVNLM_PATCH_RADIUS", 3),
        varsigma=float(os.getenv("OVNLM_VARSIGMA", "100")),
        iter_max=_env_int("OVNLM_ITER_MAX", 50),
        eval_output_dir=os.getenv("OVNLM_EVAL_OUTPUT_DIR", "eval/results"),
    )
