"""Collects acceptance outcomes and prints one line per criterion after the run."""

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 9


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"acceptance criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n}: NOT RUN  (deselected, or errored before reporting)")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
