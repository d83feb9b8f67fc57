"""Measurement records, outlier-filtered summaries, and CSV I/O.

CSV schema is a stable contract: header `experiment,variant,trial,value,unit`.
Summaries remove outliers with Tukey fences computed from the raw
quartiles — values outside [q1 - 1.5*IQR, q3 + 1.5*IQR] are dropped and
counted — then report order statistics of the surviving data.
"""

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

CSV_HEADER = ("experiment", "variant", "trial", "value", "unit")
DEFAULT_TRIALS = 1000


@dataclass(frozen=True)
class Measurement:
    experiment: str
    variant: str
    trial: int
    value: float
    unit: str
    timestamp: float = field(default_factory=time.time)


@dataclass(frozen=True)
class SummaryRow:
    variant: str
    min: float
    p25: float
    median: float
    p75: float
    mean: float
    stddev: float
    outlier_count: int


def tukey_filter(values: list[float]) -> tuple[list[float], int]:
    """Drop values outside [q1 - 1.5*IQR, q3 + 1.5*IQR]; returns (kept, dropped)."""
    if len(values) < 4:
        return list(values), 0
    q1, _, q3 = statistics.quantiles(values, n=4, method="inclusive")
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    kept = [v for v in values if lo <= v <= hi]
    return kept, len(values) - len(kept)


def summarize(variant: str, values: list[float]) -> SummaryRow:
    if not values:
        raise ValueError("cannot summarize an empty sample")
    kept, dropped = tukey_filter(values)
    if len(kept) >= 4:
        q1, median, q3 = statistics.quantiles(kept, n=4, method="inclusive")
    else:
        q1 = median = q3 = statistics.median(kept)
    return SummaryRow(
        variant=variant,
        min=min(kept),
        p25=q1,
        median=median,
        p75=q3,
        mean=statistics.fmean(kept),
        stddev=statistics.pstdev(kept) if len(kept) > 1 else 0.0,
        outlier_count=dropped,
    )


def summarize_measurements(measurements: list[Measurement]) -> list[SummaryRow]:
    by_variant: dict[str, list[float]] = {}
    order: list[str] = []
    units = {m.unit for m in measurements}
    if len(units) > 1:
        raise ValueError(f"mixed units within one experiment: {sorted(units)}")
    for m in measurements:
        if m.variant not in by_variant:
            order.append(m.variant)
        by_variant.setdefault(m.variant, []).append(m.value)
    return [summarize(variant, by_variant[variant]) for variant in order]


def write_csv(path, measurements: list[Measurement]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for m in measurements:
            writer.writerow([m.experiment, m.variant, m.trial, _fmt(m.value), m.unit])


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(value)


def read_csv(path) -> list[Measurement]:
    with Path(path).open(newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header!r}")
        return [
            Measurement(experiment=row[0], variant=row[1], trial=int(row[2]),
                        value=float(row[3]), unit=row[4])
            for row in reader
        ]


def median_by_variant(measurements: list[Measurement]) -> dict[str, float]:
    return {row.variant: row.median for row in summarize_measurements(measurements)}
