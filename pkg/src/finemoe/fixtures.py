"""Bundled measurement tables shipped as CSV fixtures.

Each file starts with ``#`` comment lines, then a header row. The last column
``anomaly`` is 1 for rows that should be excluded from shape comparisons.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from typing import Optional

SOURCES = ("table6", "table7", "table9", "table10_12", "table13")
EXTRA_SOURCES = ("table3", "v3_skip_throughput", "v3_tuples")
EXPECTED_ROWS = {
    "table3": 14, "table6": 7, "table7": 2, "table9": 14, "table10_12": 162,
    "table13": 17, "v3_skip_throughput": 7, "v3_tuples": 52,
}
TEXT_COLUMNS = {"method"}


class FixtureError(ValueError):
    pass


@dataclass
class FixtureTable:
    source: str
    columns: list
    rows: list  # list of dicts, numeric cells as int/float
    anomalies: set  # row indices flagged anomalous
    comments: list
    decimals: dict  # column -> digits after the point (0 = int)

    def column(self, name: str, include_anomalies: bool = True) -> list:
        return [r[name] for i, r in enumerate(self.rows) if include_anomalies or i not in self.anomalies]

    def to_text(self) -> str:
        buf = io.StringIO()
        for c in self.comments:
            buf.write(c + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns + ["anomaly"])
        for i, row in enumerate(self.rows):
            writer.writerow([_fmt(row[c], self.decimals.get(c)) for c in self.columns]
                            + [1 if i in self.anomalies else 0])
        return buf.getvalue()


def _fmt(value, decimals: Optional[int]) -> str:
    if isinstance(value, str):
        return value
    if decimals:
        return f"{value:.{decimals}f}"
    return str(value)


def parse_fixture(text: str, source: str) -> FixtureTable:
    lines = text.splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    reader = csv.reader(body)
    header = next(reader)
    if header[-1] != "anomaly":
        raise FixtureError(f"{source}: last column must be 'anomaly'")
    columns = header[:-1]
    rows, anomalies, decimals = [], set(), {}
    for i, cells in enumerate(reader):
        if len(cells) != len(header):
            raise FixtureError(f"{source} row {i}: expected {len(header)} cells")
        row = {}
        for col, cell in zip(columns, cells):
            if col in TEXT_COLUMNS:
                row[col] = cell
                continue
            try:
                if "." in cell:
                    row[col] = float(cell)
                    decimals[col] = max(decimals.get(col, 0), len(cell.split(".")[1]))
                else:
                    row[col] = int(cell)
            except ValueError:
                raise FixtureError(f"{source} row {i}: non-numeric cell {cell!r} in {col}") from None
        rows.append(row)
        if cells[-1] == "1":
            anomalies.add(i)
    expected = EXPECTED_ROWS.get(source)
    if expected is not None and len(rows) != expected:
        raise FixtureError(f"{source}: {len(rows)} rows, expected {expected}")
    return FixtureTable(source, columns, rows, anomalies, comments, decimals)


def fixture_text(source: str) -> str:
    if source not in SOURCES + EXTRA_SOURCES:
        raise FixtureError(f"unknown fixture {source!r}; known: {', '.join(SOURCES + EXTRA_SOURCES)}")
    return resources.files("finemoe").joinpath("data", f"{source}.csv").read_text()


def load_fixture(source: str) -> FixtureTable:
    return parse_fixture(fixture_text(source), source)
