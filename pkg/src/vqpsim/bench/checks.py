"""Ratio checks evaluated on emitted CSV rows, never on hard-coded numbers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .config import ScenarioConfig
from .metrics import CSV_HEADER, TIMELINE_HEADER, MetricRow, TimelineRow, read_rows, rows_to_csv
from .scenarios import run


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def within(value: float, target: float, rel: float) -> bool:
    return abs(value - target) <= rel * abs(target)


def _pick(rows: Iterable[MetricRow], baseline: str, clients: Optional[int] = None) -> MetricRow:
    for r in rows:
        if r.baseline == baseline and (clients is None or r.clients == clients):
            return r
    raise LookupError(f"no row for {baseline} (clients={clients})")


def check_connect(rows: list[MetricRow]) -> list[CheckResult]:
    k = _pick(rows, "krcore").p50_ns
    v = _pick(rows, "verbs").p50_ns
    lite = _pick(rows, "lite").p50_ns
    return [
        CheckResult("connect.krcore_cold", within(k, 5_400, 0.10), f"{k} ns (target 5.4us)"),
        CheckResult("connect.verbs", within(v, 15_700_000, 0.10), f"{v} ns (target 15.7ms)"),
        CheckResult("connect.lite", within(lite, 2_000_000, 0.10), f"{lite} ns (target 2ms)"),
        CheckResult("connect.verbs_over_krcore", within(v / k, 2_900, 0.10), f"{v / k:.0f}X (target 2900X +-10%)"),
        CheckResult("connect.lite_over_krcore", within(lite / k, 370, 0.10), f"{lite / k:.0f}X (target 370X +-10%)"),
    ]


def check_full_mesh(rows: list[MetricRow], totals: dict[str, int]) -> list[CheckResult]:
    k, v, lite = totals["krcore"], totals["verbs"], totals["lite"]
    return [
        CheckResult("mesh.krcore_total", k <= 100_000 and within(k, 81_000, 0.10), f"{k / 1e3:.1f} us (target 81us, <=100us)"),
        CheckResult("mesh.verbs_total", within(v, 2.7e9, 0.10), f"{v / 1e9:.3f} s (target 2.7s)"),
        CheckResult("mesh.lite_total", within(lite, 2.3e9, 0.10), f"{lite / 1e9:.3f} s (target 2.3s)"),
        CheckResult("mesh.lite_over_krcore", lite / k >= 25, f"{lite / k:.0f}X (>=25X)"),
        CheckResult("mesh.reduction_vs_verbs", 1 - k / v >= 0.99, f"{100 * (1 - k / v):.4f}% (>=99%)"),
    ]


def mesh_totals(rows: list[MetricRow]) -> dict[str, int]:
    """Total completion is the last worker's finish; with fewer than 1000 workers p999 is the maximum."""
    return {b: _pick(rows, b).p999_ns for b in ("krcore", "verbs", "lite")}


def check_memory(rows: list[MetricRow]) -> list[CheckResult]:
    mib = 1 << 20
    lite = _pick(rows, "lite", 5000).mem_bytes / mib
    k = _pick(rows, "krcore", 5000).mem_bytes / mib
    k0 = _pick(rows, "krcore", 0).mem_bytes
    flat = all(r.mem_bytes - k0 == 12 * r.clients for r in rows if r.baseline == "krcore")
    return [
        CheckResult("memory.lite_5000", within(lite, 780, 0.05), f"{lite:.1f} MB (target 780MB +-5%)"),
        CheckResult("memory.krcore_5000", within(k, 6.3, 0.05), f"{k:.2f} MB (target 6.3MB +-5%)"),
        CheckResult("memory.krcore_flat", flat, "krcore grows only by 12B per connection"),
    ]


def check_data_path(rows: list[MetricRow]) -> list[CheckResult]:
    v = _pick(rows, "verbs").p50_ns
    rc = _pick(rows, "krcore-rc").p50_ns
    dc = _pick(rows, "krcore-dc").p50_ns
    miss = _pick(rows, "krcore-rc-mrmiss").p50_ns - rc
    return [
        CheckResult("data.verbs", within(v, 2_150, 0.05), f"{v} ns (target 2.15us)"),
        CheckResult("data.krcore_rc", within(rc, 3_150, 0.05), f"{rc} ns (target 3.15us)"),
        CheckResult("data.krcore_dc", within(dc, 3_240, 0.05), f"{dc} ns (target 3.24us)"),
        CheckResult("data.mr_miss", within(miss, 4_500, 0.10), f"+{miss} ns on the first request (target 4.5us)"),
    ]


def check_pool_sweep(rows: list[MetricRow]) -> list[CheckResult]:
    rc = _pick(rows, "krcore-rc").p50_ns
    dc = {r.clients: r.p50_ns for r in rows if r.baseline == "krcore-dc"}
    ratio = dc[1] / rc
    sizes = sorted(s for s in dc if s <= 8)
    mono = all(dc[a] >= dc[b] for a, b in zip(sizes, sizes[1:]))
    return [
        CheckResult("pool.dc1_over_rc", within(ratio, 1.32, 0.15), f"{ratio:.3f} (target 1.32 +-15%)"),
        CheckResult("pool.monotone", mono, " >= ".join(f"{dc[s]}" for s in sizes) + " ns over pool 1..8"),
    ]


def spike_startups(timeline: list[TimelineRow]) -> dict[str, int]:
    return {r.baseline: r.startup_ns for r in timeline}


def check_load_spike(timeline: list[TimelineRow], rerun_equal: bool) -> list[CheckResult]:
    s = spike_startups(timeline)
    kv = s["krcore"] / s["verbs"]
    kl = s["krcore"] / s["lite"]
    return [
        CheckResult("spike.krcore_vs_verbs", kv <= 0.17 + 0.05, f"{100 * kv:.1f}% of verbs (<=17% +5pt)"),
        CheckResult("spike.krcore_vs_lite", kl <= 0.24 + 0.05, f"{100 * kl:.1f}% of lite (<=24% +5pt)"),
        CheckResult("spike.deterministic", rerun_equal, "identical CSV across two seeded runs"),
    ]


def _roundtrip(rows: list[MetricRow]) -> list[MetricRow]:
    return read_rows(rows_to_csv(rows))


def run_suite(seed: int = 1, report: Optional[Callable[[CheckResult], None]] = None) -> list[CheckResult]:
    results: list[CheckResult] = []

    def emit(batch: list[CheckResult]) -> None:
        for r in batch:
            results.append(r)
            if report:
                report(r)

    emit(check_connect(_roundtrip(run(ScenarioConfig.build("single_connect", seed=seed)).rows)))
    mesh = _roundtrip(run(ScenarioConfig.build("full_mesh", seed=seed)).rows)
    emit(check_full_mesh(mesh, mesh_totals(mesh)))
    emit(check_memory(_roundtrip(run(ScenarioConfig.build("memory_model", seed=seed)).rows)))
    emit(check_data_path(_roundtrip(run(ScenarioConfig.build("data_path", seed=seed)).rows)))
    emit(check_pool_sweep(_roundtrip(run(ScenarioConfig.build("pool_sweep", seed=seed)).rows)))
    first = run(ScenarioConfig.build("load_spike", seed=seed))
    second = run(ScenarioConfig.build("load_spike", seed=seed))
    same = (rows_to_csv(first.timeline, TIMELINE_HEADER) == rows_to_csv(second.timeline, TIMELINE_HEADER)
            and rows_to_csv(first.rows, CSV_HEADER) == rows_to_csv(second.rows, CSV_HEADER))
    emit(check_load_spike(first.timeline, same))
    return results
