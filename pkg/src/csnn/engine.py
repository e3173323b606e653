"""LIF-SFA integration for one worker's neurons.

Membrane integration is time-driven (every neuron, every step); recurrent
input is event-driven through a ring of per-step accumulation buckets.
Synaptic input is a delta pulse in mV; external drive is one aggregate
Poisson source per neuron.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numba as nb
import numpy as np

from . import rng
from .connectome import Synapses
from .model import ExternalDrive, NeuronParams
from .rng import count_from_lane, philox4x64

NO_SPIKE = -1


class NumericalError(FloatingPointError):
    def __init__(self, neuron: int, step: int):
        super().__init__(f"non-finite state for neuron {neuron} at step {step}")
        self.neuron = neuron
        self.step = step


class OrderingError(RuntimeError):
    """An event arrived for a step that has already been integrated."""


@dataclass
class NeuronState:
    v: float
    w: float = 0.0
    refractory_until: int = 0
    last_spike: int | None = None


def refractory_steps(params: NeuronParams, dt: float) -> int:
    return int(round(params.tau_refractory / dt))


def step_neuron(state: NeuronState, params: NeuronParams, input_mv: float, dt: float,
                step: int = 0, neuron: int = 0) -> tuple[NeuronState, bool]:
    """Advance one neuron by one step with exponential-Euler integration.

    The adaptation variable acts as a hyperpolarizing shift of the membrane
    asymptote; while refractory the membrane is clamped at reset.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    dm = math.exp(-dt / params.tau_m)
    ds = math.exp(-dt / params.tau_sfa)
    if step < state.refractory_until:
        v = params.v_reset
    else:
        v = (params.v_rest + (state.v - params.v_rest) * dm
             - params.sfa_coupling * state.w * (1.0 - dm) + input_mv)
    w = state.w * ds
    if not (math.isfinite(v) and math.isfinite(w)):
        raise NumericalError(neuron, step)
    if step >= state.refractory_until and v >= params.v_threshold:
        return NeuronState(params.v_reset, w + params.sfa_increment,
                           step + refractory_steps(params, dt), step), True
    return replace(state, v=v, w=w), False


def external_drive_events(drive: ExternalDrive, neuron: int, step: int, seed: int,
                          dt: float = 0.1) -> int:
    """Poisson count of external deliveries to ``neuron`` during ``step``."""
    thr = rng.poisson_thresholds(drive.mean_per_step(dt))
    return int(rng.poisson_count(np.uint64(seed), np.uint64(rng.TAG_EXTERNAL),
                                 neuron, step, thr))


class EventQueue:
    """Ring of per-step input buckets, one row per local target.

    ``buf[i, t % depth]`` accumulates the input due to target ``i`` at step
    ``t``; ``counts`` tracks how many deliveries each bucket holds.
    """

    def __init__(self, n_targets: int, depth: int):
        if depth < 1:
            raise ValueError("queue depth must be >= 1")
        self.depth = depth
        self.buf = np.zeros((n_targets, depth), dtype=np.float64)
        self.counts = np.zeros(depth, dtype=np.int64)
        self.now = 0

    def schedule(self, step: int, targets, weights) -> None:
        if not self.now <= step < self.now + self.depth:
            raise OrderingError(
                f"delivery for step {step} outside open window "
                f"[{self.now}, {self.now + self.depth})")
        targets = np.asarray(targets, dtype=np.int64)
        slot = step % self.depth
        np.add.at(self.buf[:, slot], targets, np.asarray(weights, dtype=np.float64))
        self.counts[slot] += targets.size

    def pop(self) -> tuple[np.ndarray, int]:
        """Input due at the current step, then advance the clock."""
        slot = self.now % self.depth
        out = self.buf[:, slot].copy()
        n = int(self.counts[slot])
        self.buf[:, slot] = 0.0
        self.counts[slot] = 0
        self.now += 1
        return out, n

    def pending(self) -> int:
        return int(self.counts.sum())


@nb.njit(inline="always")
def _ext_count(x0, x1, x2, x3, lane, thr):
    if lane < 4:
        wd = x0 if lane < 2 else x1
    else:
        wd = x2 if lane < 6 else x3
    r = (wd >> np.uint64(32)) if lane & 1 else (wd & np.uint64(0xFFFFFFFF))
    return count_from_lane(r, thr)


@nb.njit(nogil=True, cache=True)
def _advance(v, w, refr, last, buf, counts, gids, t0, nsteps, depth,
             dm, ds, v_rest, v_th, v_reset, ref_steps, b, coupling,
             ext_thr, ext_w, seed, tag, out_step, out_idx):
    delivered = 0
    slots = np.empty(nsteps, dtype=np.int64)
    for k in range(nsteps):
        slots[k] = (t0 + k) % depth
        delivered += counts[slots[k]]
        counts[slots[k]] = 0
    use_ext = ext_thr.shape[0] > 1
    leak = 1.0 - dm
    zero = np.uint64(0)
    n_ext = 0
    n_out = 0
    for i in range(v.shape[0]):
        vi = v[i]
        wi = w[i]
        ri = refr[i]
        gid = np.uint64(gids[i])
        blk = -1
        x0 = x1 = x2 = x3 = zero
        for k in range(nsteps):
            step = t0 + k
            slot = slots[k]
            inp = buf[i, slot]
            buf[i, slot] = 0.0
            if use_ext:
                if (step >> 3) != blk:
                    blk = step >> 3
                    x0, x1, x2, x3 = philox4x64(gid, np.uint64(blk), zero, zero, seed, tag)
                c = _ext_count(x0, x1, x2, x3, step & 7, ext_thr)
                n_ext += c
                inp += c * ext_w
            if step < ri:
                vi = v_reset
            else:
                vi = v_rest + (vi - v_rest) * dm - coupling * wi * leak + inp
            wi = wi * ds
            if not (np.isfinite(vi) and np.isfinite(wi)):
                return -(i + 1), step, delivered, n_ext
            if step >= ri and vi >= v_th:
                vi = v_reset
                wi += b
                ri = step + ref_steps
                last[i] = step
                out_step[n_out] = step
                out_idx[n_out] = i
                n_out += 1
        v[i] = vi
        w[i] = wi
        refr[i] = ri
    return n_out, 0, delivered, n_ext


@nb.njit(nogil=True, cache=True)
def _ingest(steps, sources, uniq_src, row_ptr, syn_tgt, syn_w, syn_d,
            buf, counts, now, depth):
    scheduled = 0
    n_rows = uniq_src.shape[0]
    for e in range(steps.shape[0]):
        s = sources[e]
        r = np.searchsorted(uniq_src, s)
        if r >= n_rows or uniq_src[r] != s:
            continue
        for j in range(row_ptr[r], row_ptr[r + 1]):
            td = steps[e] + syn_d[j]
            if td < now or td >= now + depth:
                return -(e + 1)
            slot = td % depth
            buf[syn_tgt[j], slot] += syn_w[j]
            counts[slot] += 1
            scheduled += 1
    return scheduled


# Declared per-item layouts used by the analytic memory accounting.
LAYOUT = {
    "synapse": 4 + 8 + 4,        # local target int32, weight float64, delay int32
    "source_row": 8 + 8,         # source id int64, row pointer int64
    "neuron_state": 8 + 8 + 8 + 8 + 8,  # v, w, refractory_until, last_spike, gid
    "queue_bucket": 8,           # float64 per (target, slot)
    "queue_counter": 8,          # int64 per slot
}


class Engine:
    """Single-threaded simulator for a fixed, sorted set of local neurons.

    ``synapses`` must contain exactly the recurrent synapses whose targets
    are local. Spikes are fed back through :meth:`ingest`, local ones
    included, so every delivery follows the same ordered path.
    """

    def __init__(self, gids: np.ndarray, synapses: Synapses, params: NeuronParams,
                 drive: ExternalDrive, *, dt: float = 0.1, seed: int = 0,
                 depth: int | None = None):
        self.gids = np.ascontiguousarray(gids, dtype=np.int64)
        if self.gids.size and np.any(np.diff(self.gids) <= 0):
            raise ValueError("local neuron ids must be strictly increasing")
        self.params = params
        self.drive = drive
        self.dt = dt
        self.seed = seed
        n = self.gids.size
        local = np.searchsorted(self.gids, synapses.target)
        if len(synapses) and (np.any(local >= n) or np.any(self.gids[np.minimum(local, n - 1)]
                                                          != synapses.target)):
            raise ValueError("synapse targets must all be local neurons")
        order = np.lexsort((local, synapses.source))
        src = synapses.source[order]
        self.uniq_src, starts = np.unique(src, return_index=True)
        self.row_ptr = np.append(starts, src.size).astype(np.int64)
        self.syn_tgt = local[order].astype(np.int32)
        self.syn_w = synapses.weight[order].astype(np.float64)
        self.syn_d = synapses.delay[order].astype(np.int32)
        if self.syn_d.size and self.syn_d.min() < 1:
            raise ValueError("synaptic delays must be >= 1 step")
        max_delay = int(self.syn_d.max()) if self.syn_d.size else 1
        self.queue = EventQueue(n, max(depth or 1, max_delay))
        self.v = np.full(n, params.v_rest)
        self.w = np.zeros(n)
        self.refractory_until = np.zeros(n, dtype=np.int64)
        self.last_spike = np.full(n, NO_SPIKE, dtype=np.int64)
        self._ext_thr = rng.poisson_thresholds(drive.mean_per_step(dt))
        self._ref_steps = refractory_steps(params, dt)
        self._dm = math.exp(-dt / params.tau_m)
        self._ds = math.exp(-dt / params.tau_sfa)
        self.delivered_events = 0
        self.scheduled_events = 0
        self.external_events = 0

    @property
    def now(self) -> int:
        return self.queue.now

    @property
    def n_neurons(self) -> int:
        return int(self.gids.size)

    @property
    def n_synapses(self) -> int:
        return int(self.syn_tgt.size)

    def out_degree(self, sources: np.ndarray) -> np.ndarray:
        """Number of local targets of each given source id."""
        r = np.searchsorted(self.uniq_src, sources)
        r = np.minimum(r, max(self.uniq_src.size - 1, 0))
        hit = self.uniq_src.size > 0
        found = (self.uniq_src[r] == sources) if hit else np.zeros(len(sources), bool)
        deg = np.diff(self.row_ptr)
        return np.where(found, deg[r] if hit else 0, 0)

    def advance(self, nsteps: int) -> tuple[np.ndarray, np.ndarray]:
        """Integrate ``nsteps`` steps; returns emitted spikes sorted by (step, id)."""
        if nsteps <= 0:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        q = self.queue
        if nsteps > q.depth:
            raise OrderingError(f"cannot advance {nsteps} steps past queue depth {q.depth}")
        cap = self.n_neurons * (nsteps // max(self._ref_steps, 1) + 1)
        out_step = np.empty(cap, np.int64)
        out_idx = np.empty(cap, np.int64)
        p = self.params
        n_out, bad_step, delivered, n_ext = _advance(
            self.v, self.w, self.refractory_until, self.last_spike, q.buf, q.counts,
            self.gids, q.now, nsteps, q.depth, self._dm, self._ds, p.v_rest,
            p.v_threshold, p.v_reset, self._ref_steps, p.sfa_increment, p.sfa_coupling,
            self._ext_thr, self.drive.weight, np.uint64(self.seed),
            np.uint64(rng.TAG_EXTERNAL), out_step, out_idx)
        if n_out < 0:
            raise NumericalError(int(self.gids[-n_out - 1]), int(bad_step))
        q.now += nsteps
        self.delivered_events += int(delivered)
        self.external_events += int(n_ext)
        steps = out_step[:n_out]
        ids = self.gids[out_idx[:n_out]]
        order = np.lexsort((ids, steps))
        return steps[order], ids[order]

    def ingest(self, steps: np.ndarray, sources: np.ndarray) -> int:
        """Schedule deliveries for spikes, processed in (step, source) order."""
        steps = np.asarray(steps, dtype=np.int64)
        sources = np.asarray(sources, dtype=np.int64)
        if steps.size == 0:
            return 0
        order = np.lexsort((sources, steps))
        steps, sources = steps[order], sources[order]
        q = self.queue
        res = _ingest(steps, sources, self.uniq_src, self.row_ptr, self.syn_tgt,
                      self.syn_w, self.syn_d, q.buf, q.counts, q.now, q.depth)
        if res < 0:
            e = -res - 1
            raise OrderingError(
                f"spike of neuron {sources[e]} at step {steps[e]} needs delivery before "
                f"step {q.now}, which is already integrated")
        self.scheduled_events += int(res)
        return int(res)

    def state(self, index: int) -> NeuronState:
        last = int(self.last_spike[index])
        return NeuronState(float(self.v[index]), float(self.w[index]),
                           int(self.refractory_until[index]), None if last < 0 else last)

    def memory_layout(self) -> dict[str, int]:
        """Analytic bytes per category from item counts and declared layouts."""
        q = self.queue
        return {
            "synapses": self.n_synapses * LAYOUT["synapse"],
            "source_index": self.uniq_src.size * LAYOUT["source_row"] + 8,
            "neuron_state": self.n_neurons * LAYOUT["neuron_state"],
            "event_queue": self.n_neurons * q.depth * LAYOUT["queue_bucket"]
                           + q.depth * LAYOUT["queue_counter"],
        }

    def live_arrays(self) -> dict[str, list[np.ndarray]]:
        """The arrays behind each accounting category, for independent audits."""
        q = self.queue
        return {
            "synapses": [self.syn_tgt, self.syn_w, self.syn_d],
            "source_index": [self.uniq_src, self.row_ptr],
            "neuron_state": [self.v, self.w, self.refractory_until, self.last_spike,
                             self.gids],
            "event_queue": [q.buf, q.counts],
        }


@dataclass
class WorkerReport:
    worker: int
    n_neurons: int
    n_synapses: int
    n_steps: int
    warmup_steps: int
    spike_steps: np.ndarray = field(repr=False)
    spike_ids: np.ndarray = field(repr=False)
    wall_time: float = 0.0
    compute_time: float = 0.0
    exchange_time: float = 0.0
    delivered_events: int = 0
    measured_delivered_events: int = 0
    scheduled_events: int = 0
    external_events: int = 0
    pending_events: int = 0
    windows: int = 0
    messages_sent: int = 0
    payload_spikes_sent: int = 0
    peak_message_bytes: int = 0
    memory: dict = field(default_factory=dict)
    setup_time: float = 0.0
    rss_bytes: int | None = None

    @property
    def n_spikes(self) -> int:
        return int(self.spike_steps.size)


# exchange(window_start, steps, ids) -> (remote_steps, remote_ids)
Exchange = Callable[[int, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def _no_exchange(window_start, steps, ids):
    return np.empty(0, np.int64), np.empty(0, np.int64)


def run_worker(engine: Engine, n_steps: int, window: int, *,
               exchange: Exchange = _no_exchange, warmup_steps: int = 0,
               worker: int = 0) -> WorkerReport:
    """Run the window loop: advance, exchange spikes, ingest local + remote.

    Wall and phase times count only windows starting at or after
    ``warmup_steps``.
    """
    if window < 1:
        raise ValueError("window must be >= 1 step")
    raster_steps, raster_ids = [], []
    compute = exch = 0.0
    wall_start = None
    windows = 0
    delivered_at_warmup = None
    t_end = time.perf_counter()
    first = engine.now
    for start in range(first, first + n_steps, window):
        nw = min(window, first + n_steps - start)
        measured = start >= warmup_steps
        t0 = time.perf_counter()
        if measured and wall_start is None:
            wall_start = t0
            delivered_at_warmup = engine.delivered_events
        steps, ids = engine.advance(nw)
        t1 = time.perf_counter()
        r_steps, r_ids = exchange(start, steps, ids)
        t2 = time.perf_counter()
        engine.ingest(np.concatenate((steps, r_steps)), np.concatenate((ids, r_ids)))
        t_end = time.perf_counter()
        if measured:
            compute += (t1 - t0) + (t_end - t2)
            exch += t2 - t1
        raster_steps.append(steps)
        raster_ids.append(ids)
        windows += 1
    return WorkerReport(
        worker=worker,
        n_neurons=engine.n_neurons,
        n_synapses=engine.n_synapses,
        n_steps=n_steps,
        warmup_steps=warmup_steps,
        spike_steps=np.concatenate(raster_steps) if raster_steps else np.empty(0, np.int64),
        spike_ids=np.concatenate(raster_ids) if raster_ids else np.empty(0, np.int64),
        wall_time=(t_end - wall_start) if wall_start is not None else 0.0,
        compute_time=compute,
        exchange_time=exch,
        delivered_events=engine.delivered_events,
        measured_delivered_events=(engine.delivered_events - delivered_at_warmup
                                   if delivered_at_warmup is not None else 0),
        scheduled_events=engine.scheduled_events,
        external_events=engine.external_events,
        pending_events=engine.queue.pending(),
        windows=windows,
        memory=engine.memory_layout(),
    )
