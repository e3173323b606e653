"""Column-to-worker assignment as balanced rectangular tiles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..model import GridSpec


@dataclass(frozen=True, eq=False)
class Partition:
    """``owner[c]`` is the worker of column ``c``.

    ``tiling`` is ``(px, py)`` for a px-by-py tile layout, or ``None`` when no
    factorization of the worker count fits the grid and contiguous row-major
    strips are used instead.
    """

    n_workers: int
    tiling: tuple[int, int] | None
    owner: np.ndarray

    def columns_of(self, worker: int) -> np.ndarray:
        return np.flatnonzero(self.owner == worker)

    def loads(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.n_workers)

    def imbalance_bound(self, spec: GridSpec) -> int:
        """Largest load spread this layout can produce."""
        if self.tiling is None:
            return 1
        px, py = self.tiling
        return (-(-spec.grid_x // px)) * (-(-spec.grid_y // py)) \
            - (spec.grid_x // px) * (spec.grid_y // py)


def _split(length: int, parts: int, coord: np.ndarray) -> np.ndarray:
    bounds = np.array([i * length // parts for i in range(parts + 1)])
    return np.searchsorted(bounds, coord, side="right") - 1


def partition_columns(spec: GridSpec, n_workers: int) -> Partition:
    """Tile the grid over ``n_workers`` as squarely as the grid allows."""
    n_cols = spec.n_columns
    if not 1 <= n_workers <= n_cols:
        raise ValueError(
            f"cannot spread {n_cols} columns over {n_workers} workers; "
            f"use between 1 and {n_cols} workers")
    gx, gy = spec.grid_x, spec.grid_y
    pairs = [(px, n_workers // px) for px in range(1, n_workers + 1)
             if n_workers % px == 0 and px <= gx and n_workers // px <= gy]
    ids = np.arange(n_cols)
    if not pairs:
        return Partition(n_workers, None, (ids * n_workers) // n_cols)
    px, py = min(pairs, key=lambda t: (abs(math.log((gx / t[0]) / (gy / t[1]))), t[0]))
    tx = _split(gx, px, ids % gx)
    ty = _split(gy, py, ids // gx)
    return Partition(n_workers, (px, py), (ty * px + tx).astype(np.int64))
