import re


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion."""
    lines = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if not m or (rep.when != "call" and rep.passed):
                continue
            n = int(m.group(1))
            detail = dict(rep.user_properties).get("detail", "no measurement recorded")
            lines[n] = f"{'PASS' if rep.passed else 'FAIL'}  criterion {n:2d}: {detail}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
