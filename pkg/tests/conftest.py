import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    num = int(name.split("_")[2])
    outcome = report.outcome
    if hasattr(report, "wasxfail"):
        outcome = "xpassed" if report.outcome == "passed" else "xfailed"
    _criteria[num] = (name, outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        name, outcome = _criteria[num]
        verdict = {"passed": "PASS", "failed": "FAIL", "xfailed": "FAIL (expected, known gap; see README)",
                   "xpassed": "PASS (was expected to fail)"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  ({name})")
