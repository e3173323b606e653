"""Domain types and closed-form connectivity math for columnar grids.

Units are fixed throughout the package: µm for distances, ms for times,
mV for potentials and Hz for rates.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class InvariantError(ValueError):
    """A domain type was constructed with values violating its invariants.

    ``field`` names the offending attribute so config parsing can point at
    the line that set it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class KernelShape(str, enum.Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class GridSpec:
    grid_x: int
    grid_y: int
    alpha: float = 100.0
    neurons_per_column: int = 1240
    excitatory_fraction: float = 0.8

    def __post_init__(self):
        if self.grid_x < 1:
            raise InvariantError("grid_x", "must be >= 1")
        if self.grid_y < 1:
            raise InvariantError("grid_y", "must be >= 1")
        if not self.alpha > 0:
            raise InvariantError("alpha", "columnar spacing must be > 0")
        if self.neurons_per_column < 1:
            raise InvariantError("neurons_per_column", "must be >= 1")
        if not 0.0 <= self.excitatory_fraction <= 1.0:
            raise InvariantError("excitatory_fraction", "must lie in [0, 1]")

    @property
    def n_columns(self) -> int:
        return self.grid_x * self.grid_y

    @property
    def n_neurons(self) -> int:
        return self.n_columns * self.neurons_per_column

    @property
    def n_excitatory(self) -> int:
        """Excitatory neurons per column."""
        return int(round(self.excitatory_fraction * self.neurons_per_column))

    @property
    def label(self) -> str:
        return f"{self.grid_x}x{self.grid_y}"


class ColumnGrid:
    """Realized layout of a :class:`GridSpec`.

    Column ids run row-major (x fastest). Each column owns a contiguous block
    of ``neurons_per_column`` global ids, excitatory neurons first.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        ids = np.arange(spec.n_columns, dtype=np.int64)
        self.cx = ids % spec.grid_x
        self.cy = ids // spec.grid_x

    @property
    def columns(self) -> list[tuple[int, tuple[int, int]]]:
        return [(int(c), (int(x), int(y)))
                for c, x, y in zip(range(self.n_columns), self.cx, self.cy)]

    @property
    def n_columns(self) -> int:
        return self.spec.n_columns

    @property
    def n_neurons(self) -> int:
        return self.spec.n_neurons

    def column_id(self, cx: int, cy: int) -> int:
        if not (0 <= cx < self.spec.grid_x and 0 <= cy < self.spec.grid_y):
            raise IndexError(f"column ({cx}, {cy}) outside {self.spec.label} grid")
        return cy * self.spec.grid_x + cx

    def coords(self, column: int) -> tuple[int, int]:
        self._check_column(column)
        return int(self.cx[column]), int(self.cy[column])

    def neuron_range(self, column: int) -> range:
        self._check_column(column)
        n = self.spec.neurons_per_column
        return range(column * n, (column + 1) * n)

    def locate(self, neuron):
        """Map global neuron id(s) to ``(column, index within column)``."""
        arr = np.asarray(neuron)
        if np.any(arr < 0) or np.any(arr >= self.n_neurons):
            raise IndexError(f"neuron id out of range [0, {self.n_neurons})")
        col, idx = np.divmod(arr, self.spec.neurons_per_column)
        if arr.ndim == 0:
            return int(col), int(idx)
        return col, idx

    def is_excitatory(self, neuron):
        _, idx = self.locate(neuron)
        return idx < self.spec.n_excitatory

    def _check_column(self, column: int) -> None:
        if not 0 <= column < self.n_columns:
            raise IndexError(f"column id {column} out of range [0, {self.n_columns})")


@dataclass(frozen=True)
class ConnectivityKernel:
    """Distance-dependent remote connection law plus the local probability.

    ``scale`` is σ for the Gaussian shape and λ for the exponential one.
    A cutoff equal to the amplitude is accepted and means local-only.
    """

    shape: KernelShape
    amplitude: float
    scale: float
    cutoff: float = 1e-3
    local_probability: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "shape", KernelShape(self.shape))
        if not 0.0 < self.amplitude <= 1.0:
            raise InvariantError("amplitude", "must lie in (0, 1]")
        if not self.scale > 0:
            raise InvariantError("scale", "must be > 0")
        if not self.cutoff > 0:
            raise InvariantError("cutoff", "must be > 0")
        if self.cutoff > self.amplitude:
            raise InvariantError(
                "cutoff",
                f"stencil constraint violated: cutoff {self.cutoff} exceeds "
                f"amplitude {self.amplitude}, no column could ever connect",
            )
        if not 0.0 <= self.local_probability <= 1.0:
            raise InvariantError("local_probability", "must lie in [0, 1]")

    @classmethod
    def gaussian(cls, amplitude=0.05, sigma=100.0, cutoff=1e-3, local_probability=0.8):
        return cls(KernelShape.GAUSSIAN, amplitude, sigma, cutoff, local_probability)

    @classmethod
    def exponential(cls, amplitude=0.03, decay=290.0, cutoff=1e-3, local_probability=0.8):
        return cls(KernelShape.EXPONENTIAL, amplitude, decay, cutoff, local_probability)

    @property
    def name(self) -> str:
        return self.shape.value


@dataclass(frozen=True)
class NeuronParams:
    """LIF neuron with spike-frequency adaptation.

    ``sfa_coupling`` scales how strongly the adaptation variable pulls the
    membrane's asymptote down (1.0 means ``w`` mV of hyperpolarizing drive).
    """

    tau_m: float = 20.0
    v_rest: float = -70.0
    v_threshold: float = -50.0
    v_reset: float = -60.0
    tau_refractory: float = 2.0
    tau_sfa: float = 120.0
    sfa_increment: float = 1.0
    j_exc: float = 0.4
    j_inh: float = -2.0
    sfa_coupling: float = 1.0

    def __post_init__(self):
        if not self.tau_m > 0:
            raise InvariantError("tau_m", "must be > 0")
        if not self.tau_sfa > 0:
            raise InvariantError("tau_sfa", "must be > 0")
        if not self.tau_refractory >= 0:
            raise InvariantError("tau_refractory", "must be >= 0")
        if not self.v_reset < self.v_threshold:
            raise InvariantError("v_reset", "must be below v_threshold")
        if not self.v_rest < self.v_threshold:
            raise InvariantError("v_rest", "must be below v_threshold")
        if not self.j_exc > 0:
            raise InvariantError("j_exc", "excitatory efficacy must be > 0")
        if not self.j_inh < 0:
            raise InvariantError("j_inh", "inhibitory efficacy must be < 0")


@dataclass(frozen=True)
class ExternalDrive:
    synapses_per_neuron: int = 540
    rate_per_synapse: float = 3.0
    weight: float = 0.6

    def __post_init__(self):
        if self.synapses_per_neuron < 0:
            raise InvariantError("synapses_per_neuron", "must be >= 0")
        if not self.rate_per_synapse >= 0:
            raise InvariantError("rate_per_synapse", "must be >= 0")

    @property
    def events_per_second(self) -> float:
        return self.synapses_per_neuron * self.rate_per_synapse

    def mean_per_step(self, dt: float) -> float:
        return self.events_per_second * dt / 1000.0


def kernel_probability(kernel: ConnectivityKernel, r):
    """Remote connection probability at inter-column distance ``r`` (µm)."""
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 0) or np.any(np.isnan(r_arr)):
        raise DomainError(f"distance must be >= 0, got {r}")
    if kernel.shape is KernelShape.GAUSSIAN:
        p = kernel.amplitude * np.exp(-(r_arr * r_arr) / (2.0 * kernel.scale**2))
    else:
        p = kernel.amplitude * np.exp(-r_arr / kernel.scale)
    return float(p) if p.ndim == 0 else p


def cutoff_radius(kernel: ConnectivityKernel) -> float:
    """Distance where the kernel decays to the cutoff; 0 when cutoff >= amplitude."""
    if kernel.cutoff >= kernel.amplitude:
        return 0.0
    ratio = math.log(kernel.amplitude / kernel.cutoff)
    if kernel.shape is KernelShape.GAUSSIAN:
        return kernel.scale * math.sqrt(2.0 * ratio)
    return kernel.scale * ratio


def stencil_halfwidth(kernel: ConnectivityKernel, alpha: float) -> int:
    """Half-width H of the square (2H+1)x(2H+1) stencil of reachable columns.

    Returns 0 (local-only) when the cutoff is not below the amplitude.
    """
    if not alpha > 0:
        raise DomainError("alpha must be > 0")
    return math.ceil(cutoff_radius(kernel) / alpha)


@lru_cache(maxsize=64)
def _reach(kernel: ConnectivityKernel, alpha: float):
    h = stencil_halfwidth(kernel, alpha)
    d = np.arange(-h, h + 1)
    dx, dy = (a.ravel() for a in np.meshgrid(d, d, indexing="xy"))
    keep = (dx != 0) | (dy != 0)
    dx, dy = dx[keep], dy[keep]
    r = alpha * np.sqrt(dx * dx + dy * dy)
    p = kernel_probability(kernel, r) if r.size else np.empty(0)
    mask = p >= kernel.cutoff
    out = (dx[mask].astype(np.int64), dy[mask].astype(np.int64),
           r[mask], np.asarray(p[mask], dtype=np.float64))
    for a in out:
        a.setflags(write=False)
    return out


def reach_offsets(kernel: ConnectivityKernel, alpha: float):
    """Remote column offsets above the cutoff.

    Returns read-only arrays ``(dx, dy, r, p)``; the origin is excluded and
    square corners below the cutoff are pruned.
    """
    return _reach(kernel, float(alpha))


def expected_out_degree(kernel: ConnectivityKernel, spec: GridSpec) -> tuple[float, float]:
    """Expected (local, remote) out-degree of a neuron in an interior column."""
    n = spec.neurons_per_column
    local = kernel.local_probability * (n - 1)
    _, _, _, p = reach_offsets(kernel, spec.alpha)
    remote = n * float(p.sum())
    return local, remote


def expected_synapse_count(kernel: ConnectivityKernel, spec: GridSpec) -> tuple[float, float]:
    """Exact expected (local, remote) synapse totals with boundary clipping."""
    n = spec.neurons_per_column
    local = spec.n_columns * n * (n - 1) * kernel.local_probability
    dx, dy, _, p = reach_offsets(kernel, spec.alpha)
    pairs = (np.clip(spec.grid_x - np.abs(dx), 0, None)
             * np.clip(spec.grid_y - np.abs(dy), 0, None))
    remote = float(np.sum(pairs * p)) * n * n
    return local, remote


def column_out_degrees(kernel: ConnectivityKernel, spec: GridSpec):
    """Expected out-degree and its binomial variance per column, clipped at edges."""
    n = spec.neurons_per_column
    grid = ColumnGrid(spec)
    pl = kernel.local_probability
    mean = np.full(spec.n_columns, pl * (n - 1))
    var = np.full(spec.n_columns, pl * (1 - pl) * (n - 1))
    dx, dy, _, p = reach_offsets(kernel, spec.alpha)
    for ox, oy, po in zip(dx, dy, p):
        inside = ((grid.cx + ox >= 0) & (grid.cx + ox < spec.grid_x)
                  & (grid.cy + oy >= 0) & (grid.cy + oy < spec.grid_y))
        mean[inside] += n * po
        var[inside] += n * po * (1 - po)
    return mean, var
