"""Shared fixtures and the acceptance summary printed after the run."""

from __future__ import annotations

import pytest

from vpnct.profiles import get_profile
from vpnct.world import World, WorldConfig, build_world

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    """Collects one verdict line per acceptance criterion."""

    def record(self, number: int, ok: bool, message: str) -> None:
        _ACCEPTANCE[number] = (ok, message)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {message}")


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


@pytest.fixture
def make_world():
    def make(profile: str = "netfilter_pre", seed: int = 0, **kw) -> World:
        return build_world(WorldConfig(get_profile(profile), seed, **kw))
    return make


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, msg = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {msg}")
