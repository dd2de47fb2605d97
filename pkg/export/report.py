import csv
import logging
import math
import numbers
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel

from experiments.fit import RateReport

logger = logging.getLogger(__name__)

RATE_HEADER = ("N", "m", "estimate", "std_error", "censored")


def format_cell(value) -> str:
    """CSV text for one cell: reals with 17 significant digits, '.' decimal."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        return "%.17g" % float(value)
    return str(value)


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a header row and data rows; no timestamp, so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def rate_table(report: RateReport) -> tuple[list[str], list[list]]:
    """Header and rows of a rate report; extra columns sorted by name."""
    extras = sorted({k for r in report.rows for k in r.extra})
    header = list(RATE_HEADER) + extras
    rows = [[r.N, r.m, r.estimate, r.std_error, r.censored]
            + [r.extra.get(k, math.nan) for k in extras] for r in report.rows]
    return header, rows


class ReportWriter:
    """Writes report.json and rows.csv for one experiment into ``out_dir``."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)

    def write_json(self, report: BaseModel) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "report.json"
        path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        logger.info("Report written: %s", path)
        return path

    def write_rows(self, header: Sequence[str], rows: Iterable[Sequence],
                   name: str = "rows.csv") -> Path:
        path = write_rows(self.out_dir / name, header, rows)
        logger.info("Rows written: %s", path)
        return path

    def write_rate_report(self, report: RateReport) -> Path:
        self.write_json(report)
        header, rows = rate_table(report)
        return self.write_rows(header, rows)
