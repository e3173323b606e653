import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csnn import rng

M64 = (1 << 64) - 1
u64 = st.integers(0, M64)


def numpy_block(c, k):
    """Reference block from numpy's Philox, which pre-increments its counter."""
    value = sum(int(x) << (64 * i) for i, x in enumerate(c))
    value = (value - 1) % (1 << 256)
    ctr = [(value >> (64 * i)) & M64 for i in range(4)]
    gen = np.random.Philox(counter=np.array(ctr, dtype=np.uint64),
                           key=np.array(k, dtype=np.uint64))
    return [int(x) for x in gen.random_raw(4)]


def ours(c, k):
    return [int(x) for x in rng.philox4x64(*(np.uint64(x) for x in c),
                                           np.uint64(k[0]), np.uint64(k[1]))]


@settings(max_examples=200, deadline=None)
@given(st.tuples(u64, u64, u64, u64), st.tuples(u64, u64))
def test_philox_matches_numpy(c, k):
    assert ours(c, k) == numpy_block(c, k)


def test_philox_counter_wrap():
    assert ours((0, 0, 0, 0), (1, 2)) == numpy_block((0, 0, 0, 0), (1, 2))
    assert ours((0, 5, 0, 0), (M64, 0)) == numpy_block((0, 5, 0, 0), (M64, 0))


def test_uniform_definition():
    seed, a, b = 42, 17, 99
    x0 = numpy_block((a, b, 0, 0), (seed, rng.TAG_SYNAPSE))[0]
    assert rng.uniform(seed, rng.TAG_SYNAPSE, a, b) == (x0 >> 11) * 2.0 ** -53


def test_uniform_is_pure_and_keyed():
    u = rng.uniform(7, rng.TAG_SYNAPSE, np.arange(100), 3)
    assert np.array_equal(u, rng.uniform(7, rng.TAG_SYNAPSE, np.arange(100), 3))
    assert not np.array_equal(u, rng.uniform(8, rng.TAG_SYNAPSE, np.arange(100), 3))
    assert not np.array_equal(u, rng.uniform(7, rng.TAG_EXTERNAL, np.arange(100), 3))
    assert np.all((u >= 0) & (u < 1))


def test_uniform_order_independent():
    a = np.arange(1000)
    fwd = rng.uniform(1, rng.TAG_SYNAPSE, a, 5)
    rev = rng.uniform(1, rng.TAG_SYNAPSE, a[::-1], 5)[::-1]
    assert np.array_equal(fwd, rev)


def test_uniform_moments():
    u = rng.uniform(3, rng.TAG_SYNAPSE, np.arange(200_000), 0)
    assert abs(u.mean() - 0.5) < 4 * math.sqrt(1 / 12 / u.size)


def test_tags_distinct():
    assert rng.TAG_SYNAPSE != rng.TAG_EXTERNAL
    assert rng.TAG_SYNAPSE == int.from_bytes(b"syn\0\0\0\0\0", "little")


class TestPoisson:
    def test_thresholds_shape(self):
        thr = rng.poisson_thresholds(0.162)
        assert thr[-1] == 1 << 32
        assert np.all(np.diff(thr.astype(np.int64)) >= 0)
        assert thr[0] == round(math.exp(-0.162) * 2 ** 32)

    def test_zero_mean(self):
        thr = rng.poisson_thresholds(0.0)
        assert rng.count_from_lane(np.uint64(0), thr) == 0
        assert rng.count_from_lane(np.uint64((1 << 32) - 1), thr) == 0

    @pytest.mark.parametrize("bad", [-1.0, float("inf")])
    def test_bad_mean(self, bad):
        with pytest.raises(ValueError):
            rng.poisson_thresholds(bad)

    def test_count_from_lane_inverse_cdf(self):
        thr = rng.poisson_thresholds(2.0)
        for r in (0, int(thr[0]) - 1, int(thr[0]), int(thr[1]), (1 << 32) - 1):
            want = sum(1 for t in thr if r >= t)
            assert rng.count_from_lane(np.uint64(r), thr) == want

    def test_lane_layout(self):
        """Step s of a neuron reads 32-bit lane s % 8 of block (neuron, s // 8)."""
        seed, neuron, mean = 9, 123, 1.3
        thr = rng.poisson_thresholds(mean)
        block = numpy_block((neuron, 5, 0, 0), (seed, rng.TAG_EXTERNAL))
        for lane in range(8):
            r = (block[lane // 2] >> (32 * (lane & 1))) & 0xFFFFFFFF
            want = int(np.searchsorted(thr, r, side="right"))
            got = rng.poisson_count(np.uint64(seed), np.uint64(rng.TAG_EXTERNAL),
                                    neuron, 5 * 8 + lane, thr)
            assert got == want

    @pytest.mark.parametrize("mean", [0.162, 1.5])
    def test_monte_carlo_moments(self, mean):
        thr = rng.poisson_thresholds(mean)
        n = 1_000_000
        counts = np.array([rng.poisson_count(np.uint64(11), np.uint64(rng.TAG_EXTERNAL),
                                             i % 1000, i // 1000, thr) for i in range(n)])
        sigma = math.sqrt(mean / n)
        assert abs(counts.mean() - mean) < 3 * sigma
        assert counts.var() == pytest.approx(mean, rel=0.02)
        p0 = math.exp(-mean)
        assert abs(np.mean(counts == 0) - p0) < 3 * math.sqrt(p0 * (1 - p0) / n)
