"""Benchmark harness: experiments, measurement records, plots."""

from virtine.bench.clock import CycleClock, default_clock
from virtine.bench.experiments import EXPERIMENTS
from virtine.bench.stats import (
    Measurement,
    SummaryRow,
    read_csv,
    summarize,
    summarize_measurements,
    tukey_filter,
    write_csv,
)

__all__ = [
    "CycleClock",
    "EXPERIMENTS",
    "Measurement",
    "SummaryRow",
    "default_clock",
    "read_csv",
    "summarize",
    "summarize_measurements",
    "tukey_filter",
    "write_csv",
]
