def pytest_terminal_summary(terminalreporter):
    # acceptance checks print their verdicts to stdout; repeat them here so
    # they survive output capture
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("ACCEPT ")]
    if lines:
        terminalreporter.section("acceptance")
        for ln in sorted(lines, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(ln)
