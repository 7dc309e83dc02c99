from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from threer.clients.mock import mock_backends

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
GOLDEN = HERE / "golden"
DEMO_DB = HERE.parent / "src" / "threer" / "data" / "demo_db.jsonl"
BANK_JSON = HERE.parent / "src" / "threer" / "data" / "default_bank.json"
BARN_INTENT = "A tranquil tableau of barn."

settings.register_profile("default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def backends(tmp_path):
    return mock_backends(tmp_path / "cache", seed=0)


@pytest.fixture
def dirs(tmp_path):
    return {"runs_dir": tmp_path / "runs", "cache_dir": tmp_path / "cache"}


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    class Recorder:
        def __init__(self):
            self.label = None

        def __call__(self, number: int, label: str) -> None:
            self.label = f"criterion {number}: {label}"

    rec = Recorder()
    yield rec
    failed = getattr(request.node, "_acceptance_failed", True)
    if rec.label:
        line = f"{'FAIL' if failed else 'PASS'} {rec.label}"
        lines.append(line)
        print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item._acceptance_failed = not report.passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
