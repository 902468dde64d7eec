import time

import pytest

from rotreg import experiments as E

ACCEPTANCE_KEY = pytest.StashKey[list]()
SWEEP_SEEDS = (0, 1, 2, 3, 4)


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    log = request.config.stash[ACCEPTANCE_KEY]

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        log.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(log):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} {title} ({detail})")


@pytest.fixture(scope="session")
def desk_sweep():
    """Default alignment and IK runs over five seeds, with the wall time."""
    start = time.perf_counter()
    reports = []
    for seed in SWEEP_SEEDS:
        for mapping in E.TRAINED_KINDS + (E.MATRIX,):
            reports.append(E.run_alignment(E.AlignConfig(mapping=mapping, seed=seed)))
        for mapping in E.TRAINED_KINDS:
            reports.append(E.run_ik(E.IKConfig(mapping=mapping, seed=seed)))
    return E.ExperimentReport.merge(reports), time.perf_counter() - start
