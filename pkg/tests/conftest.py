from __future__ import annotations

import numpy as np
import pytest

from tubeletkit.synthworld import FeatureOracleParams, WorldConfig, generate_video

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


def random_boxes(rng: np.random.Generator, n: int, lo: float = 5.0, hi: float = 120.0) -> np.ndarray:
    xy = rng.uniform(0.0, 480.0, size=(n, 2))
    wh = rng.uniform(lo, hi, size=(n, 2))
    return np.hstack([xy, wh])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_video():
    return generate_video(WorldConfig(), 11)


@pytest.fixture(scope="session")
def noiseless_world():
    return WorldConfig(oracle=FeatureOracleParams(noise_std=0.0))


@pytest.fixture(scope="session")
def ambiguous_world():
    return WorldConfig(oracle=FeatureOracleParams(temporal_ambiguity=True, noise_std=0.0))
