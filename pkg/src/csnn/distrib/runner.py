"""Run one configuration on P workers in lockstep windows.

Each worker owns a tile of columns, generates the synapses onto its own
neurons, and per window: advances, sends each subscribed peer the spikes of
the columns that peer listens to, receives one frame from every peer it
listens to, and ingests local plus remote spikes.
"""

from __future__ import annotations

import multiprocessing as mp
import queue
import resource
import sys
import threading
import time
import traceback

import numpy as np

from ..bench import SimReport, merge_rasters
from ..config import RunConfig
from ..connectome import ConnectomeBudgetError, estimate_synapses, generate_synapses
from ..engine import Engine, WorkerReport, run_worker
from ..model import ColumnGrid
from .partition import Partition, partition_columns
from .plan import ExchangePlan, build_exchange_plan
from .transport import Aborted, InProcTransport, TcpChannel, free_local_addresses
from .wire import FrameError, SpikeMessage, decode, encode


def peak_rss() -> int:
    """Peak resident set of this process in bytes."""
    scale = 1 if sys.platform == "darwin" else 1024
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * scale


class WorkerFailed(RuntimeError):
    def __init__(self, worker: int, detail: str):
        super().__init__(f"worker {worker} failed: {detail}")
        self.worker = worker


def check_budget(cfg: RunConfig) -> float:
    """Refuse runs whose expected connectome exceeds ``max_synapses``."""
    est = estimate_synapses(ColumnGrid(cfg.grid), cfg.kernel)
    if cfg.max_synapses and est > cfg.max_synapses:
        raise ConnectomeBudgetError(est, cfg.max_synapses)
    return est


def build_engine(cfg: RunConfig, partition: Partition, worker: int) -> Engine:
    grid = ColumnGrid(cfg.grid)
    cols = partition.columns_of(worker)
    syn = generate_synapses(grid, cfg.kernel, cfg.neuron, cfg.seed, target_columns=cols,
                            delays=cfg.delays, dt=cfg.dt, max_synapses=None)
    n = cfg.grid.neurons_per_column
    gids = (cols[:, None] * n + np.arange(n)[None, :]).ravel()
    return Engine(gids, syn, cfg.neuron, cfg.drive, dt=cfg.dt, seed=cfg.seed,
                  depth=cfg.window_steps)


def worker_main(cfg: RunConfig, worker: int, partition: Partition, plan: ExchangePlan,
                channel) -> WorkerReport:
    t0 = time.perf_counter()
    engine = build_engine(cfg, partition, worker)
    setup = time.perf_counter() - t0
    n = cfg.grid.neurons_per_column
    window = cfg.window_steps
    send_to = plan.send[worker]
    recv_from = plan.recv[worker]
    masks = {}
    for peer in send_to:
        m = np.zeros(cfg.grid.n_columns, dtype=bool)
        m[plan.subscribed[(worker, peer)]] = True
        masks[peer] = m
    sent = {"messages": 0, "spikes": 0, "peak": 0}

    def exchange(start, steps, ids):
        cols = ids // n
        window_bytes = 0
        for peer in send_to:
            sel = masks[peer][cols]
            data = encode(SpikeMessage(worker, start, ids[sel], steps[sel]))
            channel.send(peer, data)
            sent["messages"] += 1
            sent["spikes"] += int(sel.sum())
            window_bytes += len(data)
        r_steps, r_ids = [], []
        for peer in recv_from:
            data = channel.recv(peer)
            offset = channel.offsets[peer] - len(data)
            msg = decode(data, window, sender=peer, base_offset=offset)
            if msg.window_start != start:
                raise FrameError(peer, offset, f"window start {msg.window_start}, "
                                 f"expected {start}")
            r_steps.append(msg.steps)
            r_ids.append(msg.neurons)
            window_bytes += len(data)
        sent["peak"] = max(sent["peak"], window_bytes)
        if not r_steps:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(r_steps), np.concatenate(r_ids)

    rep = run_worker(engine, cfg.n_steps, window, exchange=exchange,
                     warmup_steps=cfg.warmup_steps, worker=worker)
    rep.setup_time = setup
    rep.messages_sent = sent["messages"]
    rep.payload_spikes_sent = sent["spikes"]
    rep.peak_message_bytes = sent["peak"]
    rep.memory["message_buffers"] = sent["peak"]
    return rep


def _run_inproc(cfg: RunConfig, partition: Partition, plan: ExchangePlan) -> list[WorkerReport]:
    p = partition.n_workers
    transport = InProcTransport(p, cfg.timeout)
    if p == 1:
        return [worker_main(cfg, 0, partition, plan, transport.channel(0))]
    results: list[WorkerReport | None] = [None] * p
    errors: list[tuple[int, BaseException]] = []

    def target(w):
        try:
            results[w] = worker_main(cfg, w, partition, plan, transport.channel(w))
        except BaseException as exc:  # noqa: BLE001 - reported below
            errors.append((w, exc))
            transport.abort.set()

    threads = [threading.Thread(target=target, args=(w,), name=f"csnn-worker-{w}")
               for w in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    primary = [e for e in errors if not isinstance(e[1], Aborted)] or errors
    if primary:
        w, exc = primary[0]
        raise WorkerFailed(w, f"{type(exc).__name__}: {exc}") from exc
    return results  # type: ignore[return-value]


def _tcp_entry(cfg: RunConfig, worker: int, addresses: dict, out: mp.Queue) -> None:
    try:
        partition = partition_columns(cfg.grid, len(addresses))
        plan = build_exchange_plan(partition, cfg.grid, cfg.kernel)
        peers = set(plan.send[worker]) | set(plan.recv[worker])
        channel = TcpChannel(worker, addresses, peers, cfg.timeout)
        try:
            rep = worker_main(cfg, worker, partition, plan, channel)
        finally:
            channel.close()
        rep.rss_bytes = peak_rss()
        out.put(("ok", worker, rep))
    except BaseException as exc:  # noqa: BLE001 - shipped to the parent
        out.put(("error", worker, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"))


def _run_tcp(cfg: RunConfig, partition: Partition) -> list[WorkerReport]:
    p = partition.n_workers
    if cfg.tcp_addresses:
        addresses = {w: (h, port) for w, h, port in cfg.tcp_addresses}
        if sorted(addresses) != list(range(p)):
            raise ValueError(f"[tcp] must list addresses for workers 0..{p - 1}")
    else:
        addresses = free_local_addresses(p)
    ctx = mp.get_context("spawn")
    out = ctx.Queue()
    procs = [ctx.Process(target=_tcp_entry, args=(cfg, w, addresses, out), daemon=True)
             for w in range(p)]
    for proc in procs:
        proc.start()
    results: list[WorkerReport | None] = [None] * p
    failure = None
    try:
        pending = p
        while pending:
            try:
                status, w, payload = out.get(timeout=0.5)
            except queue.Empty:
                dead = [w for w, proc in enumerate(procs)
                        if results[w] is None and not proc.is_alive() and proc.exitcode]
                if dead:
                    failure = WorkerFailed(dead[0], f"process exited with code "
                                           f"{procs[dead[0]].exitcode}")
                    break
                continue
            pending -= 1
            if status == "ok":
                results[w] = payload
            elif failure is None:
                failure = WorkerFailed(w, payload)
                break
    finally:
        for proc in procs:
            proc.join(timeout=1.0 if failure else cfg.timeout)
            if proc.is_alive():
                proc.terminate()
    if failure is not None:
        raise failure
    return results  # type: ignore[return-value]


def merge_reports(cfg: RunConfig, reports: list[WorkerReport], transport: str,
                  rss_bytes: int | None) -> SimReport:
    steps, ids = merge_rasters((r.spike_steps, r.spike_ids) for r in reports)
    measured = int(np.count_nonzero(steps >= cfg.warmup_steps))
    n = cfg.grid.n_neurons
    secs = (cfg.n_steps - cfg.warmup_steps) * cfg.dt / 1000.0
    memory: dict[str, int] = {}
    for r in reports:
        for k, v in r.memory.items():
            memory[k] = memory.get(k, 0) + int(v)
    report = SimReport(
        config_digest=cfg.digest,
        grid=cfg.grid.label,
        kernel=cfg.kernel.name,
        workers=len(reports),
        transport=transport,
        n_neurons=n,
        n_synapses=sum(r.n_synapses for r in reports),
        dt=cfg.dt,
        duration_ms=cfg.n_steps * cfg.dt,
        warmup_ms=cfg.warmup_steps * cfg.dt,
        wall_time=max(r.wall_time for r in reports),
        compute_time=[r.compute_time for r in reports],
        exchange_time=[r.exchange_time for r in reports],
        total_spikes=int(steps.size),
        measured_spikes=measured,
        rate_hz=measured / (n * secs) if secs > 0 else None,
        delivered_events=sum(r.delivered_events for r in reports),
        measured_delivered_events=sum(r.measured_delivered_events for r in reports),
        external_events=sum(r.external_events for r in reports),
        payload_spikes_sent=sum(r.payload_spikes_sent for r in reports),
        messages_sent=sum(r.messages_sent for r in reports),
        memory=memory,
        rss_bytes=rss_bytes,
        setup_time=max(r.setup_time for r in reports),
    )
    report.spike_steps, report.spike_ids = steps, ids
    return report


def run_distributed(cfg: RunConfig, workers: int | None = None,
                    transport: str | None = None) -> SimReport:
    """Simulate ``cfg`` on ``workers`` workers (default: the first configured count).

    The returned report carries the merged raster as ``spike_steps`` and
    ``spike_ids``; for a fixed seed it is identical for every worker count
    and transport.
    """
    p = workers if workers is not None else cfg.workers[0]
    transport = transport or cfg.transport
    check_budget(cfg)
    partition = partition_columns(cfg.grid, p)
    if transport == "inproc":
        plan = build_exchange_plan(partition, cfg.grid, cfg.kernel)
        reports = _run_inproc(cfg, partition, plan)
        rss = peak_rss()
    elif transport == "tcp":
        reports = _run_tcp(cfg, partition)
        rss = sum(r.rss_bytes or 0 for r in reports)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    return merge_reports(cfg, reports, transport, rss)
