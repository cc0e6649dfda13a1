"""Metric rows, nearest-rank percentiles and CSV output."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from fractions import Fraction
from typing import Iterable, Sequence, TextIO

CSV_HEADER = ("scenario", "baseline", "clients", "payload", "p50_ns", "p99_ns", "p999_ns",
              "throughput_per_s", "wire_ops", "mem_bytes")

TIMELINE_HEADER = ("baseline", "bucket_start_ns", "ready_workers", "throughput_per_s", "p99_ns", "startup_ns")


def nearest_rank(samples: Sequence[int], pct: float) -> int:
    """Smallest sample with at least ``pct`` percent of the samples at or below it."""
    if not samples:
        raise ValueError("no samples")
    if not 0 < pct <= 100:
        raise ValueError("percentile must be in (0, 100]")
    ordered = sorted(samples)
    # exact arithmetic: 99.9 / 100 * 1000 is 999.0000000000001 in floats
    rank = max(1, math.ceil(Fraction(str(pct)) * len(ordered) / 100))
    return ordered[rank - 1]


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    baseline: str
    clients: int
    payload: int
    p50_ns: int
    p99_ns: int
    p999_ns: int
    throughput_per_s: float
    wire_ops: int
    mem_bytes: int

    @classmethod
    def from_samples(cls, scenario: str, baseline: str, clients: int, payload: int,
                     samples: Sequence[int], throughput_per_s: float, wire_ops: int,
                     mem_bytes: int) -> "MetricRow":
        return cls(scenario, baseline, clients, payload, nearest_rank(samples, 50),
                   nearest_rank(samples, 99), nearest_rank(samples, 99.9),
                   throughput_per_s, wire_ops, mem_bytes)

    def as_csv(self) -> list[str]:
        out = []
        for f, v in zip(fields(self), astuple(self)):
            out.append(f"{v:.3f}" if f.name == "throughput_per_s" else str(v))
        return out


@dataclass(frozen=True)
class TimelineRow:
    baseline: str
    bucket_start_ns: int
    ready_workers: int
    throughput_per_s: float
    p99_ns: int
    startup_ns: int

    def as_csv(self) -> list[str]:
        return [self.baseline, str(self.bucket_start_ns), str(self.ready_workers),
                f"{self.throughput_per_s:.3f}", str(self.p99_ns), str(self.startup_ns)]


def write_rows(rows: Iterable, out: TextIO, header: Sequence[str] = CSV_HEADER) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r.as_csv())


def rows_to_csv(rows: Iterable, header: Sequence[str] = CSV_HEADER) -> str:
    buf = io.StringIO()
    write_rows(rows, buf, header)
    return buf.getvalue()


def read_rows(text: str) -> list[MetricRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    out = []
    for rec in reader:
        out.append(MetricRow(rec["scenario"], rec["baseline"], int(rec["clients"]), int(rec["payload"]),
                             int(rec["p50_ns"]), int(rec["p99_ns"]), int(rec["p999_ns"]),
                             float(rec["throughput_per_s"]), int(rec["wire_ops"]), int(rec["mem_bytes"])))
    return out


def read_timeline(text: str) -> list[TimelineRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TIMELINE_HEADER:
        raise ValueError("unexpected timeline header")
    return [TimelineRow(rec["baseline"], int(rec["bucket_start_ns"]), int(rec["ready_workers"]),
                        float(rec["throughput_per_s"]), int(rec["p99_ns"]), int(rec["startup_ns"]))
            for rec in reader]
