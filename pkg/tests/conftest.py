import io
from collections import Counter

import pytest

from elogcov.elog import ExecFrame, iterate_blocks


def frames_of(data: bytes) -> list[ExecFrame]:
    return [b for b in iterate_blocks(io.BytesIO(data)) if isinstance(b, ExecFrame)]


def byte_counts(ranges) -> Counter:
    """Brute-force per-address execution count: expands every [start, end) byte by byte."""
    counts = Counter()
    for item in ranges:
        start, end, *rest = item
        n = rest[0] if rest else 1
        for a in range(start, end):
            counts[a] += n
    return counts


def profile_counts(profile) -> Counter:
    """Expand a (start, end, count) profile into per-address counts."""
    return byte_counts(profile)


@pytest.fixture
def chdir_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


# -- acceptance reporting -------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL/SKIP line in the
# terminal summary, plus whatever detail the test attached via ``record``.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def record(request):
    """Attach a detail string to the current criterion's summary line."""
    details = []
    request.node._criterion_details = details
    return details.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "status": "PASS", "detail": []})
    if rep.skipped:
        entry["status"] = "SKIP"
        if isinstance(rep.longrepr, tuple):
            entry["detail"].append(rep.longrepr[2])
    elif rep.failed:
        entry["status"] = "FAIL"
    if rep.when == "call":
        entry["detail"].extend(getattr(item, "_criterion_details", []))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        detail = "; ".join(c["detail"])
        terminalreporter.write_line(f"{c['status']:<4}  criterion {number:>2}: {c['title']}" +
                                    (f"  [{detail}]" if detail else ""))
