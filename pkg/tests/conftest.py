from __future__ import annotations

import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    report = sys.modules.get("test_acceptance")
    if report is not None and report.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in report.REPORT:
            terminalreporter.write_line(line)
