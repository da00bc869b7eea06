from pathlib import Path

import pytest

from porogen.flow import FlowParams
from porogen.sample import SampleSpec, plan_porous_sample

CORPUS = Path(__file__).parent / "corpus"

_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    prev = _acceptance.get(number, (title, "PASS"))[1]
    if report.failed or (report.when == "call" and report.skipped):
        prev = "FAIL"
    _acceptance[number] = (title, prev)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, verdict = _acceptance[number]
        terminalreporter.write_line(f"[{verdict}] {number:>2}. {title}")


@pytest.fixture(scope="session")
def corpus_files():
    files = sorted(CORPUS.glob("*.gcode"))
    assert len(files) >= 20
    return files


@pytest.fixture(scope="session")
def sample_doc():
    return plan_porous_sample(SampleSpec())


@pytest.fixture(scope="session")
def sample_doc_abs():
    return plan_porous_sample(SampleSpec(absolute_e=True))


@pytest.fixture
def params():
    return FlowParams()
