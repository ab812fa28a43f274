import numpy as np
import pytest

from cmiforecast.config import RunConfig, SynthConfig
from cmiforecast.encoder import EncoderConfig
from cmiforecast.features import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_encoder():
    """Four blocks of width 5 covering a 16-step window."""
    return EncoderConfig(blocks=4, kernel_size=2, channels=5, latent_dim=4, window=16, n_stocks=3)


@pytest.fixture(scope="session")
def small_run_config():
    return RunConfig(channels=8, latent_dim=8, epochs=2, batch=64, lr=1e-3, head_epochs=300,
                     synth=SynthConfig(n_stocks=4, n_days=400))


@pytest.fixture(scope="session")
def small_data(small_run_config):
    from cmiforecast.pipeline import featurize

    cfg = small_run_config
    frames = synth_generate(7, cfg.synth.n_stocks, cfg.synth.n_days, cfg.synth.regime())
    return featurize(frames, cfg.replace(train_end="2015-02-01", test_start="2015-02-01",
                                         test_end="2015-08-01"))


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; call before asserting."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
