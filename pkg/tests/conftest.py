import os

import numpy as np
import pytest
from hypothesis import settings

from scch.network import ModelConfig, encode_location_index
from scch.synthetic import build_split, default_roster

os.environ.setdefault("SCCH_THREADS", "1")

settings.register_profile("scch", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("scch")

_CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion (echoed in the summary)."""

    def record(number: int, name: str, ok: bool, detail: str = ""):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        print(line)
        _CRITERIA.append(line)
        return ok

    return record


@pytest.fixture(scope="session")
def roster():
    return default_roster()


@pytest.fixture(scope="session")
def tiny_split(roster):
    return build_split(roster, 24, 7, "train"), build_split(roster, 16, 7, "test")


@pytest.fixture(scope="session")
def default_model_config(roster):
    return ModelConfig(num_maps=roster.num_maps, au_maps=encode_location_index(roster.location_index()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
