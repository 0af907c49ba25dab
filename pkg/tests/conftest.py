from __future__ import annotations

import math

import pytest

from immersed_cbas.geometry import DomainSpec, EmbeddingConfig, build_geometry

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def geo0():
    return build_geometry(DomainSpec(), EmbeddingConfig(theta=0.0))


@pytest.fixture(scope="session")
def geo25():
    return build_geometry(DomainSpec(), EmbeddingConfig(theta=math.radians(25.0)))
