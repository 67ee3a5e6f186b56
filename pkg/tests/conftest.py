from __future__ import annotations

import hashlib
from pathlib import Path

import pytest

from capsweep.fixtures import make_cpu_tree, write_default_fixture

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _CRITERIA.get(n, (title, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"
        _CRITERIA[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")


@pytest.fixture
def rapl_root(tmp_path: Path) -> Path:
    return write_default_fixture(tmp_path / "powercap")


@pytest.fixture
def cpu_root(tmp_path: Path) -> Path:
    return make_cpu_tree(tmp_path / "cpu")


def tree_digest(root: Path) -> str:
    """Checksum of every file path and content under ``root``."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
