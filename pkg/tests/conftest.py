import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_verdicts: dict[int, tuple[str, bool]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    num, name = int(m.group(1)), m.group(2).replace("_", " ")
    ok = report.passed or (report.when != "call" and not report.failed)
    prev = _verdicts.get(num, (name, True))[1]
    _verdicts[num] = (name, prev and ok)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_verdicts):
        name, ok = _verdicts[num]
        terminalreporter.write_line(f"criterion {num:02d} {'PASS' if ok else 'FAIL'}: {name}")
    passed = sum(ok for _, ok in _verdicts.values())
    terminalreporter.write_line(f"{passed}/{len(_verdicts)} criteria passed")
