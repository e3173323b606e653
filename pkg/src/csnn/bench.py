"""Performance metrics, run reports, and CSV/JSON emitters."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass
class SimReport:
    """Measurements of one run, post-warmup unless noted.

    ``memory`` holds analytic bytes by category; ``rss_bytes`` is the OS
    resident-set probe and is never folded into the analytic figures.
    """

    config_digest: str
    grid: str
    kernel: str
    workers: int
    transport: str
    n_neurons: int
    n_synapses: int
    dt: float
    duration_ms: float
    warmup_ms: float
    wall_time: float
    compute_time: list[float]
    exchange_time: list[float]
    total_spikes: int
    measured_spikes: int
    rate_hz: float | None
    delivered_events: int
    measured_delivered_events: int
    external_events: int
    payload_spikes_sent: int = 0
    messages_sent: int = 0
    memory: dict[str, int] = field(default_factory=dict)
    rss_bytes: int | None = None
    setup_time: float = 0.0
    # merged raster, kept out of the serialized form
    spike_steps: np.ndarray | None = field(default=None, repr=False, compare=False)
    spike_ids: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.rate_hz is not None and self.measured_seconds > 0:
            expect = self.measured_spikes / (self.n_neurons * self.measured_seconds)
            if not math.isclose(self.rate_hz, expect, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError("rate_hz disagrees with spike count")
        if self.wall_time < 0 or min(self.compute_time + self.exchange_time, default=0) < 0:
            raise ValueError("negative timing")

    @property
    def measured_seconds(self) -> float:
        return max(self.duration_ms - self.warmup_ms, 0.0) / 1000.0

    @property
    def wall_per_sim_second(self) -> float | None:
        s = self.measured_seconds
        return self.wall_time / s if s > 0 else None

    @property
    def cost_per_event(self) -> float | None:
        w = self.wall_per_sim_second
        if w is None or self.n_synapses == 0:
            return None
        return cost_per_synaptic_event(w, self.n_synapses, self.rate_hz or 0.0)

    @property
    def cost_per_delivered_event(self) -> float | None:
        if not self.measured_delivered_events:
            return None
        return self.wall_time / self.measured_delivered_events

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("spike_steps", "spike_ids")}
        d.update(
            wall_per_sim_second=self.wall_per_sim_second,
            cost_per_event=self.cost_per_event,
            cost_per_delivered_event=self.cost_per_delivered_event,
            memory_total=sum(self.memory.values()),
            bytes_per_synapse=memory_per_synapse(self) if self.n_synapses else None,
            resident_bytes_per_synapse=resident_per_synapse(self),
        )
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        names = set(cls.__dataclass_fields__) - {"spike_steps", "spike_ids"}
        return cls(**{k: v for k, v in d.items() if k in names})


def cost_per_synaptic_event(wall_per_sim_second: float, n_synapses: float,
                            rate_hz: float) -> float | None:
    """Wall seconds per synaptic event; ``None`` when the rate is zero."""
    if n_synapses <= 0:
        raise ValueError("synapse count must be > 0")
    if rate_hz < 0 or wall_per_sim_second < 0:
        raise ValueError("rate and wall time must be >= 0")
    if rate_hz == 0:
        return None
    return wall_per_sim_second / (n_synapses * rate_hz)


@dataclass(frozen=True)
class ScalingRow:
    workers: int
    time: float
    speedup: float
    efficiency: float


@dataclass
class ScalingTable:
    rows: list[ScalingRow]

    @property
    def baseline(self) -> ScalingRow:
        return self.rows[0]

    def row(self, workers: int) -> ScalingRow:
        for r in self.rows:
            if r.workers == workers:
                return r
        raise KeyError(workers)


def speedup_efficiency(table: Iterable[tuple[int, float]]) -> ScalingTable:
    """Strong-scaling speedup and efficiency against the smallest worker count.

    ``time`` may be wall time per simulated second or cost per event; only
    ratios matter.
    """
    rows = sorted((int(p), float(t)) for p, t in table)
    if not rows:
        raise ValueError("scaling table needs at least one row")
    ps = [p for p, _ in rows]
    if len(set(ps)) != len(ps):
        raise ValueError(f"duplicate worker counts in {ps}")
    if any(t <= 0 for _, t in rows) or any(p < 1 for p in ps):
        raise ValueError("worker counts must be >= 1 and times > 0")
    p0, t0 = rows[0]
    out = []
    for p, t in rows:
        s = t0 / t
        out.append(ScalingRow(p, t, s, s * p0 / p))
    return ScalingTable(out)


def memory_per_synapse(report: SimReport) -> float:
    """Analytic bytes per recurrent synapse."""
    if report.n_synapses <= 0:
        raise ValueError("memory per synapse needs a nonempty connectome")
    return sum(report.memory.values()) / report.n_synapses


def resident_per_synapse(report: SimReport) -> float | None:
    if report.rss_bytes is None or report.n_synapses <= 0:
        return None
    return report.rss_bytes / report.n_synapses


@dataclass(frozen=True)
class CostRatio:
    cost_ratio: float | None
    elapsed_ratio: float | None


def connectivity_cost_ratio(report_exp: SimReport, report_gauss: SimReport) -> CostRatio:
    """Exponential-over-Gaussian ratio of per-event cost and of elapsed time."""
    if report_exp.grid != report_gauss.grid or report_exp.workers != report_gauss.workers:
        raise ValueError(
            f"reports differ in grid or worker count: {report_exp.grid}/P={report_exp.workers} "
            f"vs {report_gauss.grid}/P={report_gauss.workers}")
    ce, cg = report_exp.cost_per_event, report_gauss.cost_per_event
    we, wg = report_exp.wall_per_sim_second, report_gauss.wall_per_sim_second
    return CostRatio(ce / cg if ce and cg else None, we / wg if we and wg else None)


CSV_COLUMNS = ("grid", "kernel", "workers", "n_syn", "rate_hz", "wall_per_sim_s",
               "cost_per_event_s", "speedup", "efficiency", "bytes_per_synapse",
               "config_digest")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def csv_rows(reports: Sequence[SimReport], table: ScalingTable | None = None) -> list[dict]:
    rows = []
    for r in reports:
        srow = table.row(r.workers) if table else None
        rows.append({
            "grid": r.grid,
            "kernel": r.kernel,
            "workers": r.workers,
            "n_syn": r.n_synapses,
            "rate_hz": r.rate_hz,
            "wall_per_sim_s": r.wall_per_sim_second,
            "cost_per_event_s": r.cost_per_event,
            "speedup": srow.speedup if srow else None,
            "efficiency": srow.efficiency if srow else None,
            "bytes_per_synapse": memory_per_synapse(r) if r.n_synapses else None,
            "config_digest": r.config_digest,
        })
    # plot-ready ordering
    rows.sort(key=lambda d: (d["grid"], d["kernel"], d["workers"]))
    return rows


def to_csv(reports: Sequence[SimReport], table: ScalingTable | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in csv_rows(reports, table):
        w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def merge_rasters(parts: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate per-worker rasters sorted by (step, neuron)."""
    parts = list(parts)
    if not parts:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    steps = np.concatenate([p[0] for p in parts]).astype(np.int64)
    ids = np.concatenate([p[1] for p in parts]).astype(np.int64)
    order = np.lexsort((ids, steps))
    return steps[order], ids[order]
