import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_verdicts = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _verdicts[number] = (status, report.nodeid.split("::")[-1], detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        status, name, detail = _verdicts[number]
        line = f"{status} criterion {number} ({name})"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
