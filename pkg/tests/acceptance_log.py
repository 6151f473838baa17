"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
LINES = []


def record(number, ok, detail):
    LINES.append(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok
