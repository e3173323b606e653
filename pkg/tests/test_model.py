import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csnn.model import (
    ColumnGrid,
    ConnectivityKernel,
    DomainError,
    ExternalDrive,
    GridSpec,
    InvariantError,
    KernelShape,
    column_out_degrees,
    cutoff_radius,
    expected_out_degree,
    expected_synapse_count,
    kernel_probability,
    reach_offsets,
    stencil_halfwidth,
)

GAUSS = ConnectivityKernel.gaussian()
EXPO = ConnectivityKernel.exponential()


def brute_reach(kernel, alpha, h=30):
    """All nonzero offsets in a generous square whose probability clears the cutoff."""
    out = []
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            if dx == dy == 0:
                continue
            r = alpha * math.hypot(dx, dy)
            if kernel.shape is KernelShape.GAUSSIAN:
                p = kernel.amplitude * math.exp(-r * r / (2 * kernel.scale ** 2))
            else:
                p = kernel.amplitude * math.exp(-r / kernel.scale)
            if p >= kernel.cutoff:
                out.append((dx, dy, p))
    return out


class TestKernel:
    def test_closed_form_values(self):
        assert kernel_probability(GAUSS, 100.0) == pytest.approx(0.05 * math.exp(-0.5), rel=1e-12)
        assert kernel_probability(GAUSS, 100.0) == pytest.approx(0.030327, abs=5e-7)
        assert kernel_probability(EXPO, 290.0) == pytest.approx(0.011036, abs=5e-7)

    def test_origin_is_amplitude(self):
        assert kernel_probability(GAUSS, 0.0) == 0.05
        assert kernel_probability(EXPO, 0.0) == 0.03

    def test_vectorized(self):
        r = np.array([0.0, 100.0, 200.0])
        assert np.allclose(kernel_probability(GAUSS, r),
                           [kernel_probability(GAUSS, float(x)) for x in r])

    @pytest.mark.parametrize("bad", [-1.0, float("nan")])
    def test_bad_distance(self, bad):
        with pytest.raises(DomainError):
            kernel_probability(GAUSS, bad)

    @given(st.floats(0, 5000), st.floats(0, 5000))
    def test_monotone_non_increasing(self, a, b):
        lo, hi = min(a, b), max(a, b)
        for k in (GAUSS, EXPO):
            assert kernel_probability(k, hi) <= kernel_probability(k, lo)

    def test_cutoff_above_amplitude_rejected(self):
        with pytest.raises(InvariantError) as info:
            ConnectivityKernel.gaussian(cutoff=0.1)
        assert info.value.field == "cutoff"
        assert "stencil" in str(info.value)

    def test_cutoff_equal_amplitude_is_local_only(self):
        k = ConnectivityKernel.gaussian(cutoff=0.05)
        assert stencil_halfwidth(k, 100.0) == 0
        assert reach_offsets(k, 100.0)[0].size == 0


class TestStencil:
    def test_halfwidths(self):
        assert stencil_halfwidth(GAUSS, 100.0) == 3
        assert stencil_halfwidth(EXPO, 100.0) == 10

    def test_cutoff_radius_closed_form(self):
        assert cutoff_radius(GAUSS) == pytest.approx(100 * math.sqrt(2 * math.log(50)))
        assert cutoff_radius(EXPO) == pytest.approx(290 * math.log(30))

    @pytest.mark.parametrize("kernel", [GAUSS, EXPO], ids=["gaussian", "exponential"])
    def test_reach_matches_brute_force(self, kernel):
        dx, dy, r, p = reach_offsets(kernel, 100.0)
        want = brute_reach(kernel, 100.0)
        assert sorted(zip(dx.tolist(), dy.tolist())) == sorted((a, b) for a, b, _ in want)
        assert p.sum() == pytest.approx(sum(q for *_, q in want), rel=1e-12)
        h = stencil_halfwidth(kernel, 100.0)
        assert np.abs(dx).max() <= h and np.abs(dy).max() <= h

    def test_gaussian_reach_size(self):
        assert reach_offsets(GAUSS, 100.0)[0].size == 20

    def test_reach_is_read_only(self):
        dx, *_ = reach_offsets(GAUSS, 100.0)
        with pytest.raises(ValueError):
            dx[0] = 99


class TestGrid:
    def test_counts(self):
        spec = GridSpec(24, 24)
        assert spec.n_columns == 576
        assert spec.n_neurons == 714_240
        assert spec.n_excitatory == 992

    def test_locate_round_trip(self):
        grid = ColumnGrid(GridSpec(3, 2, neurons_per_column=5))
        gids = np.arange(grid.n_neurons)
        cols, _ = grid.locate(gids)
        assert np.array_equal(cols, gids // 5)
        assert grid.column_id(2, 1) == 5
        assert grid.coords(5) == (2, 1)
        assert list(grid.neuron_range(1)) == list(range(5, 10))
        with pytest.raises(IndexError):
            grid.locate(np.array([30]))

    def test_excitatory_block_first(self):
        grid = ColumnGrid(GridSpec(2, 1, neurons_per_column=10))
        exc = grid.is_excitatory(np.arange(20))
        assert exc[:8].all() and not exc[8:10].any() and exc[10:18].all()

    @pytest.mark.parametrize("kw", [dict(grid_x=0, grid_y=1), dict(grid_x=1, grid_y=1, alpha=0),
                                    dict(grid_x=1, grid_y=1, neurons_per_column=0),
                                    dict(grid_x=1, grid_y=1, excitatory_fraction=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(InvariantError):
            GridSpec(**kw)


class TestDegrees:
    def brute_degrees(self, kernel, spec):
        """Per-column expected out-degree by summing pair probabilities directly."""
        n = spec.neurons_per_column
        out = np.zeros(spec.n_columns)
        for s in range(spec.n_columns):
            sx, sy = s % spec.grid_x, s // spec.grid_x
            total = kernel.local_probability * (n - 1)
            for t in range(spec.n_columns):
                if t == s:
                    continue
                tx, ty = t % spec.grid_x, t // spec.grid_x
                p = float(kernel_probability(kernel, spec.alpha * math.hypot(tx - sx, ty - sy)))
                if p >= kernel.cutoff:
                    total += n * p
            out[s] = total
        return out

    @pytest.mark.parametrize("kernel", [GAUSS, EXPO], ids=["gaussian", "exponential"])
    def test_column_degrees_brute(self, kernel):
        spec = GridSpec(9, 7, neurons_per_column=11)
        mean, var = column_out_degrees(kernel, spec)
        assert np.allclose(mean, self.brute_degrees(kernel, spec), rtol=1e-12)
        assert np.all(var > 0)

    @pytest.mark.parametrize("kernel", [GAUSS, EXPO], ids=["gaussian", "exponential"])
    def test_total_is_sum_of_columns(self, kernel):
        spec = GridSpec(9, 7, neurons_per_column=11)
        local, remote = expected_synapse_count(kernel, spec)
        assert local + remote == pytest.approx(
            self.brute_degrees(kernel, spec).sum() * spec.neurons_per_column, rel=1e-12)

    def test_interior_out_degree(self):
        spec = GridSpec(24, 24, neurons_per_column=124)
        local, remote = expected_out_degree(GAUSS, spec)
        assert local == pytest.approx(0.8 * 123)
        assert remote == pytest.approx(124 * reach_offsets(GAUSS, 100.0)[3].sum())

    def test_edges_never_exceed_interior(self):
        spec = GridSpec(30, 30, neurons_per_column=10)
        for k in (GAUSS, EXPO):
            mean, _ = column_out_degrees(k, spec)
            local, remote = expected_out_degree(k, spec)
            assert mean.max() <= local + remote + 1e-9

    def test_single_column_grid(self):
        spec = GridSpec(1, 1, neurons_per_column=50)
        local, remote = expected_synapse_count(GAUSS, spec)
        assert remote == 0
        assert local == pytest.approx(50 * 49 * 0.8)


class TestTableSizes:
    """Analytic full-scale synapse counts, compared at order-of-magnitude tolerance."""

    @pytest.mark.parametrize("size,gauss,expo", [(24, 0.9e9, 1.5e9), (48, 3.5e9, 5.9e9),
                                                 (96, 14.2e9, 23.4e9)])
    def test_recurrent_totals(self, size, gauss, expo):
        spec = GridSpec(size, size)
        assert sum(expected_synapse_count(GAUSS, spec)) == pytest.approx(gauss, rel=0.10)
        assert sum(expected_synapse_count(EXPO, spec)) == pytest.approx(expo, rel=0.25)


def test_external_drive_mean():
    drive = ExternalDrive()
    assert drive.events_per_second == pytest.approx(1620.0)
    assert drive.mean_per_step(0.1) == pytest.approx(0.162)
