"""Shared pytest hooks.

The release-gate module prints one verdict line per check so a full run can
be audited from the terminal log alone; everything else is standard pytest.
"""

import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or item.module.__name__ != "test_acceptance":
        return
    tr = item.config.pluginmanager.get_plugin("terminalreporter")
    if tr is None:
        return
    verdict = "PASS" if report.passed else "FAIL"
    label = item.name[len("test_"):].replace("_", " ")
    tr.write_line(f"[gate] {verdict}: {label} ({report.duration:.1f}s)")
