import os
import re

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)_")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("GRIDFURN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="long-running; set GRIDFURN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            match = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not match or (rep.when != "call" and outcome != "skipped" and outcome != "error"):
                continue
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            if outcome == "skipped" and isinstance(rep.longrepr, tuple):
                detail = rep.longrepr[2].removeprefix("Skipped: ")
            label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP", "error": "FAIL"}[outcome]
            rows[int(match.group(1))] = f"criterion {int(match.group(1)):>2}: {label}  {detail}".rstrip()
    if rows:
        terminalreporter.section("acceptance criteria")
        for k in sorted(rows):
            terminalreporter.write_line(rows[k])
