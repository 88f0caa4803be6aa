import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

TINY = {
    "n_train": 160, "n_test": 64, "num_classes": 4, "height": 8, "width": 8,
    "victim_epochs": 2, "victim_batch_size": 32, "clean_fraction": 0.25,
    "epochs": 2, "warmup_epochs": 1, "batch_size": 16, "pgd_steps": 2,
    "probe_size": 16, "risk_instances": 5,
}

# criterion number -> (title, [outcome, ...], [note, ...])
ACCEPTANCE = {}


def note(n, text):
    ACCEPTANCE.setdefault(n, ("", [], []))[2].append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = ACCEPTANCE.setdefault(n, (title, [], []))
    if entry[0] != title:
        ACCEPTANCE[n] = entry = (title, entry[1], entry[2])
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1].append("passed" if rep.passed else "skipped" if rep.skipped else "failed")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, outcomes, notes = ACCEPTANCE[n]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif "failed" in outcomes:
            status = "FAIL"
        else:
            status = "SKIP"
        detail = f" ({'; '.join(notes)})" if notes else ""
        tr.write_line(f"criterion {n:2d} {status:7} {title}{detail}")
