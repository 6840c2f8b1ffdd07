import numpy as np
import pytest

from ctxmod.synth import SynthConfig, generate_dataset

FAST_SYNTH = SynthConfig(calibration_images=600)

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small on-disk dataset shared by training, analysis and CLI tests."""
    out = tmp_path_factory.mktemp("data") / "tiny"
    generate_dataset(240, 80, 3, seed=7, out=out, config=FAST_SYNTH)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pool_safe(x: np.ndarray, margin: float = 1e-3) -> bool:
    """True when every 2x2 window's max beats its runner-up by ``margin``."""
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    win = x[..., :h, :w].reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).swapaxes(-3, -2)
    win = win.reshape(win.shape[:-2] + (4,))
    s = np.sort(win, axis=-1)
    return bool(np.all(s[..., -1] - s[..., -2] > margin))
