from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: (int(c.rstrip("abcdefgh")), c)):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:<3} {'PASS' if ok else 'FAIL'}  {detail}")
