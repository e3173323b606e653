import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csnn.config import preset_config
from csnn.connectome import ConnectomeBudgetError
from csnn.distrib import (
    FrameError,
    InProcTransport,
    PeerTimeout,
    SpikeMessage,
    TcpChannel,
    WorkerFailed,
    build_exchange_plan,
    decode,
    encode,
    partition_columns,
    run_distributed,
)
from csnn.distrib.transport import free_local_addresses
from csnn.distrib.wire import HEADER, PAIR
from csnn.model import ConnectivityKernel, GridSpec, kernel_probability, stencil_halfwidth

GAUSS = ConnectivityKernel.gaussian()
EXPO = ConnectivityKernel.exponential()


class TestPartition:
    @pytest.mark.parametrize("gx,gy,p", [(8, 8, 1), (8, 8, 4), (8, 8, 16), (24, 24, 96),
                                         (5, 5, 4), (7, 3, 5), (12, 12, 9), (3, 1, 3)])
    def test_covers_every_column_once(self, gx, gy, p):
        spec = GridSpec(gx, gy, neurons_per_column=1)
        part = partition_columns(spec, p)
        assert part.owner.shape == (gx * gy,)
        assert set(part.owner.tolist()) == set(range(p))
        loads = part.loads()
        assert loads.sum() == gx * gy
        assert loads.max() - loads.min() <= part.imbalance_bound(spec)

    def test_square_tiles(self):
        part = partition_columns(GridSpec(24, 24, neurons_per_column=1), 96)
        assert part.tiling == (8, 12)
        assert np.all(part.loads() == 6)
        part = partition_columns(GridSpec(8, 8, neurons_per_column=1), 16)
        assert part.tiling == (4, 4)

    def test_tiles_are_rectangles(self):
        spec = GridSpec(12, 9, neurons_per_column=1)
        part = partition_columns(spec, 6)
        for w in range(6):
            cols = part.columns_of(w)
            xs, ys = cols % 12, cols // 12
            assert cols.size == (xs.max() - xs.min() + 1) * (ys.max() - ys.min() + 1)

    def test_prime_fallback(self):
        spec = GridSpec(2, 3, neurons_per_column=1)
        part = partition_columns(spec, 5)
        assert part.tiling is None
        assert part.loads().max() - part.loads().min() <= 1

    def test_single_column(self):
        part = partition_columns(GridSpec(1, 1, neurons_per_column=4), 1)
        assert part.owner.tolist() == [0]

    @pytest.mark.parametrize("p", [0, 65])
    def test_bad_worker_count(self, p):
        with pytest.raises(ValueError, match="workers"):
            partition_columns(GridSpec(8, 8, neurons_per_column=1), p)


def brute_plan(part, spec, kernel):
    """(sender, receiver) -> source columns, by testing every column pair."""
    subs = {}
    gx = spec.grid_x
    for s in range(spec.n_columns):
        for t in range(spec.n_columns):
            if s == t or part.owner[s] == part.owner[t]:
                continue
            r = spec.alpha * np.hypot(s % gx - t % gx, s // gx - t // gx)
            if kernel_probability(kernel, r) >= kernel.cutoff:
                subs.setdefault((int(part.owner[s]), int(part.owner[t])), set()).add(s)
    return subs


class TestPlan:
    @pytest.mark.parametrize("kernel", [GAUSS, EXPO], ids=["gaussian", "exponential"])
    @pytest.mark.parametrize("p", [1, 4, 6, 16])
    def test_matches_brute_force(self, kernel, p):
        spec = GridSpec(12, 8, neurons_per_column=1)
        part = partition_columns(spec, p)
        plan = build_exchange_plan(part, spec, kernel)
        want = brute_plan(part, spec, kernel)
        assert {k: set(v.tolist()) for k, v in plan.subscribed.items()} == want
        for w in range(p):
            assert set(plan.send[w]) == {r for s, r in want if s == w}
            assert set(plan.recv[w]) == {s for s, r in want if r == w}

    def test_square_stencil_superset(self):
        spec = GridSpec(12, 12, neurons_per_column=1)
        part = partition_columns(spec, 9)
        pruned = build_exchange_plan(part, spec, GAUSS)
        square = build_exchange_plan(part, spec, halfwidth=stencil_halfwidth(GAUSS, 100.0))
        for key, cols in pruned.subscribed.items():
            assert set(cols.tolist()) <= set(square.subscribed[key].tolist())

    def test_interior_peer_count(self):
        spec = GridSpec(24, 24, neurons_per_column=1)
        plan = build_exchange_plan(partition_columns(spec, 16), spec, GAUSS)
        # 6x6 tiles, reach 2 columns: interior workers talk to all 8 neighbours
        assert plan.peer_counts().max() == 8

    def test_local_only_kernel_has_no_peers(self):
        spec = GridSpec(8, 8, neurons_per_column=1)
        plan = build_exchange_plan(partition_columns(spec, 4), spec,
                                   ConnectivityKernel.gaussian(cutoff=0.05))
        assert plan.peer_counts().sum() == 0


u64 = st.integers(0, 2**63 - 1)


class TestWire:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**40),
           st.lists(st.tuples(u64, st.integers(0, 9)), max_size=50))
    def test_round_trip(self, sender, start, pairs):
        ids = np.array([p[0] for p in pairs], dtype=np.int64)
        steps = np.array([start + p[1] for p in pairs], dtype=np.int64)
        data = encode(SpikeMessage(sender, start, ids, steps))
        assert len(data) == 16 + 16 * len(pairs)
        msg = decode(data, 10, sender=sender)
        assert (msg.sender, msg.window_start) == (sender, start)
        assert np.array_equal(msg.neurons, ids) and np.array_equal(msg.steps, steps)

    def test_layout(self):
        data = encode(SpikeMessage(3, 500, np.array([7]), np.array([505])))
        assert data[:16] == HEADER.pack(3, 500, 1)
        assert data[16:] == (7).to_bytes(8, "little") + (505).to_bytes(8, "little")
        assert HEADER.size == 16 and PAIR.itemsize == 16

    def test_empty_message(self):
        msg = decode(encode(SpikeMessage(1, 0, np.empty(0), np.empty(0))), 10)
        assert len(msg) == 0

    def test_short_header(self):
        with pytest.raises(FrameError) as info:
            decode(b"\x00" * 10, sender=2, base_offset=100)
        assert info.value.sender == 2 and info.value.offset == 100

    def test_count_mismatch(self):
        data = encode(SpikeMessage(1, 0, np.arange(3), np.arange(3)))
        with pytest.raises(FrameError, match="count 3"):
            decode(data[:-1])

    def test_wrong_sender(self):
        data = encode(SpikeMessage(1, 0, np.arange(2), np.arange(2)))
        with pytest.raises(FrameError, match="sender"):
            decode(data, sender=4)

    def test_step_outside_window(self):
        data = encode(SpikeMessage(1, 100, np.array([1, 2]), np.array([100, 110])))
        with pytest.raises(FrameError) as info:
            decode(data, 10, base_offset=1000)
        assert info.value.offset == 1000 + 16 + 16


class TestTransport:
    def test_inproc_ordered(self):
        t = InProcTransport(2, timeout=2)
        a, b = t.channel(0), t.channel(1)
        for k in range(5):
            a.send(1, bytes([k]))
        assert [b.recv(0) for _ in range(5)] == [bytes([k]) for k in range(5)]
        assert b.offsets[0] == 5

    def test_inproc_timeout(self):
        t = InProcTransport(2, timeout=0.2)
        with pytest.raises(PeerTimeout) as info:
            t.channel(0).recv(1)
        assert info.value.peer == 1

    def test_tcp_exchange(self):
        addrs = free_local_addresses(3)
        got = {}

        def worker(w):
            ch = TcpChannel(w, addrs, {p for p in range(3) if p != w}, timeout=10)
            for p in range(3):
                if p != w:
                    ch.send(p, bytes([w]) * (1000 * (w + 1)))
            got[w] = {p: ch.recv(p) for p in range(3) if p != w}
            got[(w, "off")] = dict(ch.offsets)
            ch.close()

        threads = [threading.Thread(target=worker, args=(w,)) for w in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(20)
        for w in range(3):
            for p, data in got[w].items():
                assert data == bytes([p]) * (1000 * (p + 1))
                assert got[(w, "off")][p] == 4 + len(data)

    def test_tcp_connect_timeout(self):
        addrs = free_local_addresses(2)
        with pytest.raises(PeerTimeout):
            TcpChannel(0, addrs, {1}, timeout=0.5)


def small(kernel="gaussian", **kw):
    cfg = preset_config(f"desk-{kernel}-8x8", duration=300.0, warmup=100.0, seed=11)
    return cfg.with_overrides(**kw) if kw else cfg


class TestRunner:
    def test_partition_invariance(self):
        cfg = small()
        ref = run_distributed(cfg, workers=1)
        assert ref.total_spikes > 0
        for p in (2, 4, 6, 16):
            rep = run_distributed(cfg, workers=p)
            assert np.array_equal(rep.spike_steps, ref.spike_steps), p
            assert np.array_equal(rep.spike_ids, ref.spike_ids), p
            assert rep.n_synapses == ref.n_synapses
            assert rep.delivered_events == ref.delivered_events

    def test_tcp_matches_inproc(self):
        cfg = small("exponential", duration=150.0, warmup=50.0)
        a = run_distributed(cfg, workers=4, transport="inproc")
        b = run_distributed(cfg, workers=4, transport="tcp")
        assert np.array_equal(a.spike_steps, b.spike_steps)
        assert np.array_equal(a.spike_ids, b.spike_ids)
        assert b.transport == "tcp" and b.rss_bytes > 0

    def test_report_fields(self):
        cfg = small()
        rep = run_distributed(cfg, workers=4)
        assert rep.workers == 4 and rep.grid == "8x8" and rep.kernel == "gaussian"
        assert rep.config_digest == cfg.digest
        assert len(rep.compute_time) == 4
        assert rep.measured_spikes == int(np.sum(rep.spike_steps >= cfg.warmup_steps))
        assert rep.rate_hz == pytest.approx(rep.measured_spikes / (cfg.grid.n_neurons * 0.2))
        assert rep.messages_sent > 0 and rep.memory["message_buffers"] > 0
        single = run_distributed(cfg, workers=1)
        assert single.messages_sent == 0

    def test_budget_refused_before_running(self):
        cfg = small(max_synapses=1000)
        with pytest.raises(ConnectomeBudgetError):
            run_distributed(cfg, workers=2)

    def test_zero_duration(self):
        rep = run_distributed(small(duration=0.0, warmup=0.0), workers=4)
        assert rep.total_spikes == 0 and rep.rate_hz is None

    def test_worker_failure_propagates(self, monkeypatch):
        from csnn.distrib import runner

        real = runner.build_engine

        def broken(cfg, partition, worker):
            if worker == 2:
                raise RuntimeError("boom")
            return real(cfg, partition, worker)

        monkeypatch.setattr(runner, "build_engine", broken)
        with pytest.raises(WorkerFailed) as info:
            run_distributed(small(timeout=5.0), workers=4)
        assert info.value.worker == 2 and "boom" in str(info.value)
