import numpy as np
import pytest

from pptvit import ModelConfig, ModelWeights

ACCEPTANCE_RESULTS = []


@pytest.fixture
def tiny_config():
    return ModelConfig(image_size=32, patch_size=8, channels=3, dim=16, depth=4,
                       heads=2, num_classes=10)


@pytest.fixture
def tiny_weights(tiny_config):
    return ModelWeights.synthetic(tiny_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}: {detail}")
