import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tides.data import SynthConfig, generate_synthetic
from tides.model import TidesConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_city():
    """Eight regions over eight days: enough for every split and a week of TOD windows."""
    return generate_synthetic(SynthConfig(n_regions=8, days=8, seed=3))


@pytest.fixture
def tiny_cfg():
    return TidesConfig(history=32, horizon=4, d_model=8, n_heads=2, patch_len=16, stride=8,
                       backbone_layers=1, prompt_max_len=6, e_low_dim=4, vocab_size=12)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance outcome; the terminal summary prints them in order."""
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
