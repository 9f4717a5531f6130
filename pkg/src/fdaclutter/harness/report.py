"""Experiment results and CSV/markdown emission."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ExperimentResult:
    experiment_id: str
    seed: int
    config_digest: str
    tables: dict[str, list[dict]] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)
    columns: dict[str, list[str]] = field(default_factory=dict)

    def declare_table(self, table: str, columns: list[str]) -> None:
        """Fix a table's column order (and emit a header even when it has no rows)."""
        self.columns[table] = list(columns)
        self.tables.setdefault(table, [])

    def add_row(self, table: str, **row) -> None:
        self.tables.setdefault(table, []).append(row)

    def count_failure(self, kind: str, n: int = 1) -> None:
        if n:
            self.failures[kind] = self.failures.get(kind, 0) + n

    def table(self, name: str) -> list[dict]:
        return self.tables.get(name, [])

    def lookup(self, table: str, **coords) -> dict:
        hits = [r for r in self.table(table) if all(r.get(k) == v for k, v in coords.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows in {table!r} match {coords}")
        return hits[0]


def format_value(v) -> str:
    """Floats as 6-significant-digit scientific; ints and strings verbatim."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.5e}"
    return str(v)


def _columns(rows: list[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def render_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    cols = columns if columns is not None else _columns(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([format_value(r.get(c, "")) for c in cols])
    return buf.getvalue()


def render_markdown(rows: list[dict], title: str, columns: list[str] | None = None) -> str:
    cols = columns if columns is not None else _columns(rows)
    lines = [f"## {title}", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(format_value(r.get(c, "")) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def _meta_rows(result: ExperimentResult) -> list[dict]:
    rows = [
        {"key": "experiment_id", "value": result.experiment_id},
        {"key": "seed", "value": int(result.seed)},
        {"key": "config_digest", "value": result.config_digest},
    ]
    for kind in sorted(result.failures):
        rows.append({"key": f"failures.{kind}", "value": int(result.failures[kind])})
    return rows


def emit_report(result: ExperimentResult, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write one file per table (plus a metadata file); returns the paths."""
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    ext = "csv" if fmt == "csv" else "md"
    paths = []
    tables = dict(result.tables)
    tables["meta"] = _meta_rows(result)
    for name, rows in tables.items():
        path = out / f"{result.experiment_id}_{name}.{ext}"
        cols = result.columns.get(name)
        if fmt == "csv":
            text = render_csv(rows, cols)
        else:
            text = render_markdown(rows, f"{result.experiment_id}: {name}", cols)
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"cannot write report {path}: {exc}") from exc
        paths.append(path)
    return paths


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
