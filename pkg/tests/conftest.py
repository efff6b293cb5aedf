import random
import time

import pytest

from cdsframe.sim import SimHarness


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def harness(tmp_path):
    return SimHarness(seed=99, workdir=tmp_path)


@pytest.fixture
def alice(harness):
    """A registered, authenticated client session."""
    session = harness.new_client()
    session.register("alice", "wonderland")
    return session


# -- acceptance summary -------------------------------------------------------

_acceptance_lines = []
_session_start = time.perf_counter()
SUITE_BUDGET_S = 30.0


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (report.when == "call" or report.failed):
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        callspec = getattr(item, "callspec", None)
        if callspec is not None:
            doc += f" [{callspec.id}]"
        status = "PASS" if report.passed else "FAIL"
        _acceptance_lines.append(f"{status}  {doc}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
        elapsed = time.perf_counter() - _session_start
        status = "PASS" if elapsed < SUITE_BUDGET_S else "FAIL"
        terminalreporter.write_line(
            f"{status}  criterion 3 (timing): this pytest session took {elapsed:.1f} s, budget {SUITE_BUDGET_S:.0f} s")
