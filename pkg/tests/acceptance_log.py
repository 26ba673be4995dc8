"""Collects one summary line per acceptance criterion for the terminal report."""

LINES = []


def record(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    return passed
