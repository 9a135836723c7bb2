import os
from collections import defaultdict
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

# criterion number -> list of (test id, outcome, detail)
_ACCEPTANCE = defaultdict(list)
_TITLES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test checks")


def _matrix_dirs():
    env = os.environ.get("REFLOAT_MATRIX_DIR")
    dirs = [Path(env)] if env else []
    dirs += [ROOT / "data" / "suitesparse", ROOT / "data"]
    return dirs


def find_matrix(name: str):
    """Path to a SuiteSparse matrix in Matrix Market form, or None."""
    for d in _matrix_dirs():
        for cand in (d / f"{name}.mtx", d / f"{name}.mtx.gz", d / name / f"{name}.mtx"):
            if cand.is_file():
                return cand
    return None


@pytest.fixture
def suitesparse():
    def get(name):
        path = find_matrix(name)
        if path is None:
            pytest.skip(
                f"{name}.mtx not found (set REFLOAT_MATRIX_DIR or place it in data/suitesparse)"
            )
        return path

    return get


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _TITLES[number] = title
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = ""
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _ACCEPTANCE[number].append((item.name, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        results = _ACCEPTANCE[number]
        outcomes = {o for _, o, _ in results}
        if "failed" in outcomes:
            status = "FAIL"
        elif outcomes == {"skipped"}:
            status = "SKIP"
        elif "skipped" in outcomes:
            status = "PARTIAL"
        else:
            status = "PASS"
        parts = ", ".join(f"{name}={o}" for name, o, _ in results)
        tr.write_line(f"criterion {number} [{status}] {_TITLES[number]}: {parts}")
        for name, o, detail in results:
            if o == "skipped" and detail:
                tr.write_line(f"    {name}: {detail}")
