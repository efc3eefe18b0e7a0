import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    report = getattr(mod, "REPORT", None)
    if mod is None:
        return
    ran = {item for item in report} if report else set()
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, (ok, detail) in sorted(report.items(), key=lambda kv: _order(kv[0])):
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {name}: {detail}")
    failed = [r for r in tr.stats.get("failed", []) + tr.stats.get("error", [])
              if "test_acceptance" in r.nodeid and not any(_slug(n) in r.nodeid for n in ran)]
    for r in failed:
        tr.write_line(f"FAIL  {r.nodeid.split('::')[-1]}: raised before reporting ({r.longrepr.reprcrash.message if hasattr(r.longrepr, 'reprcrash') else 'error'})")


def _order(name):
    head = name.split()[0]
    digits = "".join(c for c in head if c.isdigit())
    return (int(digits), head)


def _slug(name):
    head = name.split()[0]
    digits = "".join(c for c in head if c.isdigit())
    return f"criterion_{int(digits):02d}"
