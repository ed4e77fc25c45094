"""Structured report output: line-delimited JSON records plus text tables.

Every record carries the stable fields ``command``, ``step``, ``metric``
and ``value``; check records add ``passed``.  Files are one JSON object
per line so acceptance checks can be scripted against them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass


def record_line(command: str, step, metric: str, value, **extra) -> str:
    record = {"command": command, "step": step, "metric": metric, "value": value}
    record.update(extra)
    return json.dumps(record, sort_keys=True)


def write_records(path: str, lines: list[str]) -> None:
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def read_records(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    out = []
    for r, row in enumerate(cells):
        out.append("  ".join(col.ljust(w) for col, w in zip(row, widths)).rstrip())
        if r == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


@dataclass
class CheckResult:
    """Outcome of one verification check."""

    name: str
    passed: bool
    value: float
    threshold: str

    def as_record(self) -> str:
        return record_line(
            "verify", 0, self.name, self.value,
            passed=self.passed, threshold=self.threshold,
        )
