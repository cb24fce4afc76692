import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from paedid.nn import ArchSpec, TrainConfig, train_autoencoder
from paedid.synth import SynthConfig, gen_background

settings.register_profile("paedid", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("paedid")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SynthConfig(seed=3, image_size=(32, 32), style="grain")
    return [gen_background(cfg, i) for i in range(12)]


@pytest.fixture(scope="session")
def small_model(small_corpus):
    """A 32x32 autoencoder with an 8x8x4 latent, trained briefly."""
    arch = ArchSpec((32, 32, 1), (4, 4))
    return train_autoencoder(small_corpus, TrainConfig(epochs=3, batch_size=4, seed=1), arch)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
