import numpy as np
import pytest
from hypothesis import settings

from sceneenc.data import BenchmarkConfig, build_benchmark

settings.register_profile("sceneenc", deadline=None, max_examples=100, derandomize=True)
settings.load_profile("sceneenc")


@pytest.fixture(scope="session")
def small_dataset():
    cfg = BenchmarkConfig(points_per_scene=128, n_train=12, n_val=4, n_test=4)
    return build_benchmark(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
