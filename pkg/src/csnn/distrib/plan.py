"""Which workers must exchange spikes, derived from the reachable stencil."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import ConnectivityKernel, GridSpec, reach_offsets
from .partition import Partition


@dataclass
class ExchangePlan:
    """Per-worker peer sets plus the source columns each receiver subscribes to.

    ``subscribed[(sender, receiver)]`` lists the sender's columns having at
    least one reachable column owned by ``receiver``.
    """

    send: list[tuple[int, ...]]
    recv: list[tuple[int, ...]]
    subscribed: dict[tuple[int, int], np.ndarray]

    @property
    def n_workers(self) -> int:
        return len(self.send)

    def peer_counts(self) -> np.ndarray:
        return np.array([len(s) for s in self.send])


def _offsets(spec: GridSpec, kernel: ConnectivityKernel | None, halfwidth: int | None):
    if kernel is not None:
        dx, dy, _, _ = reach_offsets(kernel, spec.alpha)
        return dx, dy
    h = int(halfwidth or 0)
    d = np.arange(-h, h + 1)
    dx, dy = (a.ravel() for a in np.meshgrid(d, d))
    keep = (dx != 0) | (dy != 0)
    return dx[keep], dy[keep]


def build_exchange_plan(partition: Partition, spec: GridSpec,
                        kernel: ConnectivityKernel | None = None, *,
                        halfwidth: int | None = None) -> ExchangePlan:
    """Plan from the cutoff-pruned stencil of ``kernel``.

    Without a kernel, the full square stencil of ``halfwidth`` is used.
    """
    gx, gy = spec.grid_x, spec.grid_y
    ids = np.arange(spec.n_columns)
    cx, cy = ids % gx, ids // gx
    owner = partition.owner
    senders, receivers, cols = [], [], []
    for ox, oy in zip(*_offsets(spec, kernel, halfwidth)):
        tx, ty = cx + ox, cy + oy
        ok = (tx >= 0) & (tx < gx) & (ty >= 0) & (ty < gy)
        src = ids[ok]
        ws = owner[src]
        wr = owner[ty[ok] * gx + tx[ok]]
        cross = ws != wr
        senders.append(ws[cross])
        receivers.append(wr[cross])
        cols.append(src[cross])
    p = partition.n_workers
    send: list[set] = [set() for _ in range(p)]
    recv: list[set] = [set() for _ in range(p)]
    subscribed: dict[tuple[int, int], np.ndarray] = {}
    if senders:
        key = np.concatenate(senders).astype(np.int64) * p + np.concatenate(receivers)
        col = np.concatenate(cols)
        trip = np.unique(np.stack([key, col], axis=1), axis=0) if key.size else np.empty((0, 2), int)
        for k in np.unique(trip[:, 0]):
            s, r = divmod(int(k), p)
            send[s].add(r)
            recv[r].add(s)
            subscribed[(s, r)] = trip[trip[:, 0] == k, 1]
    return ExchangePlan([tuple(sorted(s)) for s in send],
                        [tuple(sorted(r)) for r in recv], subscribed)
