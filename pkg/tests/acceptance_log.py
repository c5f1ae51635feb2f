"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES = []


def verdict(number: int, title: str, ok: bool, detail: str) -> bool:
    LINES.append(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    return ok
