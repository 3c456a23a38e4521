"""Result tables and their serialization.

Reports are deterministic: rerunning an experiment with the same config and
seed produces byte-identical JSON and CSV artifacts, so no wall-clock data
is ever written into them. CSV files are RFC-4180 (CRLF, quoted when
needed) with one file per table; floats are serialized via repr so the
round trip is exact.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

Cell = str | int | float


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[Cell]]

    def __post_init__(self) -> None:
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(
                    f"table {self.name!r}: row of width {len(row)} vs {len(self.columns)} columns"
                )


@dataclass
class Report:
    experiment: str
    config: dict[str, str]
    seed: int
    version: str
    config_hash: str
    tables: list[Table] = field(default_factory=list)

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(f"report has no table {name!r}; have {[t.name for t in self.tables]}")


def _cell_to_text(value: Cell) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_to_json(report: Report) -> str:
    doc = {
        "experiment": report.experiment,
        "provenance": {
            "seed": report.seed,
            "version": report.version,
            "config_hash": report.config_hash,
        },
        "config": report.config,
        "tables": {
            t.name: {"columns": t.columns, "rows": t.rows} for t in report.tables
        },
    }
    return json.dumps(doc, indent=2)


def report_from_json(text: str) -> Report:
    doc = json.loads(text)
    return Report(
        experiment=doc["experiment"],
        config=dict(doc["config"]),
        seed=int(doc["provenance"]["seed"]),
        version=str(doc["provenance"]["version"]),
        config_hash=str(doc["provenance"]["config_hash"]),
        tables=[
            Table(name=name, columns=list(t["columns"]), rows=[list(r) for r in t["rows"]])
            for name, t in doc["tables"].items()
        ],
    )


def table_to_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_cell_to_text(c) for c in row])
    return buf.getvalue()


def table_from_csv(text: str, name: str) -> Table:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty csv")
    return Table(name=name, columns=rows[0], rows=[list(r) for r in rows[1:]])


def write_report(
    report: Report, out_dir, formats: Sequence[str] = ("json", "csv")
) -> list[Path]:
    """Emit the report as report_<experiment>.json and/or one
    <experiment>_<table>.csv per table; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for fmt in formats:
        if fmt == "json":
            path = out / f"report_{report.experiment}.json"
            path.write_text(report_to_json(report), encoding="utf-8")
            written.append(path)
        elif fmt == "csv":
            for t in report.tables:
                path = out / f"{report.experiment}_{t.name}.csv"
                path.write_text(table_to_csv(t), encoding="utf-8", newline="")
                written.append(path)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written
