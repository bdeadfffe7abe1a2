import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT / "src") not in sys.path:
    sys.path.insert(0, str(ROOT / "src"))

from ovnlm.config import get_settings  # noqa: E402
from ovnlm.cube_io import SpectralCube  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("OVNLM_EVAL_OUTPUT_DIR", str(tmp_path / "results"))
    monkeypatch.delenv("OVNLM_THREADS", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def make_cube():
    def factory(height: int, width: int, bands: int, seed: int = 0, scale: float = 255.0) -> SpectralCube:
        rng = np.random.default_rng(seed)
        return SpectralCube(rng.uniform(0.0, scale, size=(height, width, bands)))

    return factory
