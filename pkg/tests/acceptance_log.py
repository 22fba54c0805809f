"""Collects one line per acceptance criterion for the terminal summary."""

LINES = []


def record(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    LINES.append(line)
    print(line)
    return passed
