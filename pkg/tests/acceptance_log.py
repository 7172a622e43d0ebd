"""Shared record of acceptance verdicts, echoed in the terminal summary."""

ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
