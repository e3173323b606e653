"""Deterministic sampling of the recurrent synapse population.

Each ordered pair ``(source, target)`` with a nonzero connection probability
is tested once against a keyed uniform draw, so the sampled edge set depends
only on ``(grid, kernel, seed)`` and never on how targets are chunked.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numba as nb
import numpy as np

from . import rng
from .rng import keyed_uniform
from .model import (
    ColumnGrid,
    ConnectivityKernel,
    GridSpec,
    InvariantError,
    NeuronParams,
    expected_synapse_count,
    kernel_probability,
    reach_offsets,
    stencil_halfwidth,
)

DEFAULT_MAX_SYNAPSES = 100_000_000


class ConnectomeBudgetError(RuntimeError):
    def __init__(self, estimate: float, budget: int):
        super().__init__(
            f"connectome would hold ~{estimate:.4g} synapses, above the budget of "
            f"{budget}; raise max_synapses to proceed"
        )
        self.estimate = estimate
        self.budget = budget


class SynapseRecord(NamedTuple):
    source: int
    target: int
    weight: float
    delay: int


@dataclass(frozen=True)
class DelayRule:
    """Axonal delay assignment.

    ``constant`` gives every synapse ``min_delay``; ``linear`` uses
    ``max(min_delay, r / v)`` with the conduction velocity ``v`` in m/s.
    """

    min_delay: float = 1.0
    mode: str = "constant"
    conduction_velocity: float = 0.5

    def __post_init__(self):
        if self.mode not in ("constant", "linear"):
            raise InvariantError("delay_mode", f"unknown delay mode {self.mode!r}")
        if not self.min_delay > 0:
            raise InvariantError("min_delay", "must be > 0")
        if not self.conduction_velocity > 0:
            raise InvariantError("conduction_velocity", "must be > 0")

    def min_steps(self, dt: float) -> int:
        steps = int(round(self.min_delay / dt))
        if steps < 1:
            raise InvariantError("min_delay", f"must span at least one timestep (dt={dt})")
        return steps

    def steps(self, r, dt: float):
        """Delay in timesteps for inter-column distance ``r`` (µm)."""
        base = self.min_steps(dt)
        if self.mode == "constant":
            return np.full(np.shape(r), base, dtype=np.int64)
        travel_ms = np.asarray(r, dtype=np.float64) / (self.conduction_velocity * 1000.0)
        return np.maximum(base, np.rint(travel_ms / dt).astype(np.int64))

    def max_steps(self, kernel: ConnectivityKernel, alpha: float, dt: float) -> int:
        _, _, r, _ = reach_offsets(kernel, alpha)
        if r.size == 0:
            return self.min_steps(dt)
        return int(max(self.min_steps(dt), self.steps(r, dt).max()))


@dataclass
class Synapses:
    """Struct-of-arrays synapse population; iterating yields records."""

    source: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    delay: np.ndarray

    def __len__(self) -> int:
        return int(self.source.shape[0])

    def __iter__(self) -> Iterator[SynapseRecord]:
        for s, t, w, d in zip(self.source.tolist(), self.target.tolist(),
                              self.weight.tolist(), self.delay.tolist()):
            yield SynapseRecord(s, t, w, d)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.source.tolist(), self.target.tolist()))

    @classmethod
    def empty(cls) -> "Synapses":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64),
                   np.empty(0, np.float64), np.empty(0, np.int32))

    @classmethod
    def concat(cls, parts: Sequence["Synapses"]) -> "Synapses":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("source", "target", "weight", "delay")))


def pair_probability(grid: ColumnGrid, kernel: ConnectivityKernel,
                     source: int, target: int) -> float:
    if source == target:
        raise ValueError(f"autapse requested for neuron {source}")
    cs, _ = grid.locate(source)
    ct, _ = grid.locate(target)
    if cs == ct:
        return kernel.local_probability
    sx, sy = grid.coords(cs)
    tx, ty = grid.coords(ct)
    h = stencil_halfwidth(kernel, grid.spec.alpha)
    dx, dy = sx - tx, sy - ty
    if abs(dx) > h or abs(dy) > h:
        return 0.0
    p = kernel_probability(kernel, grid.spec.alpha * float(np.hypot(dx, dy)))
    return p if p >= kernel.cutoff else 0.0


def _offset_table(kernel: ConnectivityKernel, spec: GridSpec,
                  delays: DelayRule, dt: float):
    """Source-column offsets (origin included) sorted so column ids ascend."""
    dx, dy, r, p = reach_offsets(kernel, spec.alpha)
    dx = np.concatenate([[0], dx])
    dy = np.concatenate([[0], dy])
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[kernel.local_probability], p])
    order = np.lexsort((dx, dy))
    return (dx[order], dy[order], p[order],
            delays.steps(r[order], dt).astype(np.int32))


@nb.njit(nogil=True, cache=True)
def _sample_into(targets, start, gx, gy, n, off_dx, off_dy, off_p, off_delay,
                 seed, tag, src, tgt, dly, indeg, m, store):
    """Sample from ``targets[start:]`` into preallocated buffers.

    Stops before a target whose worst case might overflow the buffers and
    returns ``(next target index, fill level)`` so the caller can grow them.
    """
    worst = off_dx.shape[0] * n
    for ti in range(start, targets.shape[0]):
        if store and src.shape[0] - m < worst:
            return ti, m
        t = targets[ti]
        ct = t // n
        cx = ct % gx
        cy = ct // gx
        ut = np.uint64(t)
        for o in range(off_dx.shape[0]):
            sx = cx + off_dx[o]
            sy = cy + off_dy[o]
            if sx < 0 or sx >= gx or sy < 0 or sy >= gy:
                continue
            p = off_p[o]
            if p <= 0.0:
                continue
            base = (sy * gx + sx) * n
            for s in range(base, base + n):
                if s == t:
                    continue
                if keyed_uniform(seed, tag, np.uint64(s), ut) < p:
                    indeg[ti] += 1
                    if store:
                        src[m] = s
                        tgt[m] = t
                        dly[m] = off_delay[o]
                        m += 1
    return targets.shape[0], m


def _run_sampler(grid: ColumnGrid, kernel: ConnectivityKernel, seed: int,
                 targets: np.ndarray, delays: DelayRule, dt: float,
                 capacity: int, store: bool):
    spec = grid.spec
    n = spec.neurons_per_column
    dx, dy, p, d = _offset_table(kernel, spec, delays, dt)
    worst = dx.shape[0] * n
    cap = max(capacity, worst) if store else 0
    src = np.empty(cap, np.int64)
    tgt = np.empty(cap, np.int64)
    dly = np.empty(cap, np.int32)
    indeg = np.zeros(targets.shape[0], np.int64)
    ti, m = 0, 0
    while ti < targets.shape[0]:
        ti, m = _sample_into(targets, ti, spec.grid_x, spec.grid_y, n, dx, dy, p, d,
                             np.uint64(seed), np.uint64(rng.TAG_SYNAPSE),
                             src, tgt, dly, indeg, m, store)
        if ti < targets.shape[0]:
            grow = max(src.shape[0] // 2, worst)
            src = np.concatenate((src[:m], np.empty(src.shape[0] - m + grow, np.int64)))
            tgt = np.concatenate((tgt[:m], np.empty(tgt.shape[0] - m + grow, np.int64)))
            dly = np.concatenate((dly[:m], np.empty(dly.shape[0] - m + grow, np.int32)))
    return src[:m], tgt[:m], dly[:m], indeg


def _targets_for(grid: ColumnGrid, target_columns) -> np.ndarray:
    n = grid.spec.neurons_per_column
    if target_columns is None:
        return np.arange(grid.n_neurons, dtype=np.int64)
    cols = np.unique(np.asarray(list(target_columns), dtype=np.int64))
    if cols.size and (cols[0] < 0 or cols[-1] >= grid.n_columns):
        raise IndexError("target column out of range")
    return (cols[:, None] * n + np.arange(n)[None, :]).ravel()


def estimate_synapses(grid: ColumnGrid, kernel: ConnectivityKernel,
                      target_columns=None) -> float:
    if target_columns is None:
        local, remote = expected_synapse_count(kernel, grid.spec)
        return local + remote
    from .model import column_out_degrees

    # in-degree expectation equals out-degree expectation by symmetry
    mean, _ = column_out_degrees(kernel, grid.spec)
    cols = np.unique(np.asarray(list(target_columns), dtype=np.int64))
    return float(mean[cols].sum()) * grid.spec.neurons_per_column


def generate_synapses(grid: ColumnGrid, kernel: ConnectivityKernel,
                      neuron_params: NeuronParams, seed: int,
                      target_columns: Iterable[int] | None = None, *,
                      delays: DelayRule = DelayRule(), dt: float = 0.1,
                      max_synapses: int | None = DEFAULT_MAX_SYNAPSES) -> Synapses:
    """Sample synapses whose targets lie in ``target_columns`` (all if None).

    Output is ordered by target, then source. Raises
    :class:`ConnectomeBudgetError` when the expected count exceeds
    ``max_synapses``; pass ``None`` to disable the check.
    """
    estimate = estimate_synapses(grid, kernel, target_columns)
    if max_synapses is not None and estimate > max_synapses:
        raise ConnectomeBudgetError(estimate, max_synapses)
    targets = _targets_for(grid, target_columns)
    src, tgt, dly, _ = _run_sampler(grid, kernel, seed, targets, delays, dt,
                                    int(estimate * 1.02) + 1024, True)
    n = grid.spec.neurons_per_column
    wgt = np.where(src % n < grid.spec.n_excitatory,
                   neuron_params.j_exc, neuron_params.j_inh)
    return Synapses(src, tgt, wgt, dly)


def sample_in_degrees(grid: ColumnGrid, kernel: ConnectivityKernel, seed: int,
                      target_columns: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Count-only sampling: ``(targets, in-degree)`` without storing edges."""
    targets = _targets_for(grid, target_columns)
    *_, indeg = _run_sampler(grid, kernel, seed, targets, DelayRule(), 0.1, 0, False)
    return targets, indeg


@dataclass
class ConnectomeStats:
    total_synapses: int
    local_synapses: int
    mean_out_degree: float
    local_fraction: float
    stencil_halfwidth: int
    out_degree_histogram: np.ndarray = field(repr=False)

    @property
    def remote_synapses(self) -> int:
        return self.total_synapses - self.local_synapses

    def to_dict(self) -> dict:
        return {
            "total_synapses": self.total_synapses,
            "local_synapses": self.local_synapses,
            "remote_synapses": self.remote_synapses,
            "mean_out_degree": self.mean_out_degree,
            "local_fraction": self.local_fraction,
            "stencil_halfwidth": self.stencil_halfwidth,
            "stencil": f"{2 * self.stencil_halfwidth + 1}x{2 * self.stencil_halfwidth + 1}",
            "out_degree_histogram": self.out_degree_histogram.tolist(),
        }


def connectome_stats(synapses: Synapses | Iterable[Synapses], grid: ColumnGrid,
                     kernel: ConnectivityKernel | None = None) -> ConnectomeStats:
    """Exact statistics; accepts one population or an iterable of disjoint chunks."""
    chunks = [synapses] if isinstance(synapses, Synapses) else list(synapses)
    n = grid.spec.neurons_per_column
    out_deg = np.zeros(grid.n_neurons, dtype=np.int64)
    local = 0
    for c in chunks:
        if len(c) == 0:
            continue
        out_deg += np.bincount(c.source, minlength=grid.n_neurons)
        local += int(np.count_nonzero(c.source // n == c.target // n))
    total = int(out_deg.sum())
    return ConnectomeStats(
        total_synapses=total,
        local_synapses=local,
        mean_out_degree=total / grid.n_neurons,
        local_fraction=local / total if total else 0.0,
        stencil_halfwidth=stencil_halfwidth(kernel, grid.spec.alpha) if kernel else -1,
        out_degree_histogram=np.bincount(out_deg),
    )


# Binary dump: 32-byte header then fixed 24-byte little-endian records.
DUMP_MAGIC = b"CSNN"
DUMP_VERSION = 1
DUMP_HEADER = struct.Struct("<4sIIIII Q".replace(" ", ""))
DUMP_RECORD = np.dtype([("source", "<u8"), ("target", "<u8"),
                        ("weight", "<f4"), ("delay", "<u4")])
assert DUMP_HEADER.size == 32 and DUMP_RECORD.itemsize == 24


class DumpHeader(NamedTuple):
    version: int
    grid_x: int
    grid_y: int
    neurons_per_column: int
    digest_prefix: int
    count: int


def write_connectome(path, synapses: Synapses, spec: GridSpec, digest: str = "") -> None:
    """Write the binary dump; the header's spare word carries a digest prefix."""
    prefix = int(digest[:8], 16) if digest else 0
    rec = np.empty(len(synapses), dtype=DUMP_RECORD)
    rec["source"] = synapses.source
    rec["target"] = synapses.target
    rec["weight"] = synapses.weight
    rec["delay"] = synapses.delay
    with open(path, "wb") as fh:
        fh.write(DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, spec.grid_x, spec.grid_y,
                                  spec.neurons_per_column, prefix, len(synapses)))
        fh.write(rec.tobytes())


def read_connectome(path) -> tuple[DumpHeader, Synapses]:
    raw = Path(path).read_bytes()
    if len(raw) < DUMP_HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, *fields = DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    header = DumpHeader(*fields)
    body = len(raw) - DUMP_HEADER.size
    if body != header.count * DUMP_RECORD.itemsize:
        raise ValueError(
            f"{path}: header announces {header.count} records but body holds {body} bytes")
    rec = np.frombuffer(raw, dtype=DUMP_RECORD, offset=DUMP_HEADER.size)
    syn = Synapses(rec["source"].astype(np.int64), rec["target"].astype(np.int64),
                   rec["weight"].astype(np.float64), rec["delay"].astype(np.int32))
    return header, syn
