"""Keyed counter-based random numbers (Philox4x64-10).

Every draw is a pure function of ``(seed, stream tag, a, b)``: the key is
``(seed, tag)`` and the counter is ``(a, b, 0, 0)``. No generator state is
carried between draws, so any subset of draws can be reproduced by any
worker in any order.

The block function is bit-compatible with ``numpy.random.Philox``, whose
``random_raw`` increments the counter before encrypting it.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)


def _tag(name: str) -> int:
    return int.from_bytes(name.encode().ljust(8, b"\0")[:8], "little")


TAG_SYNAPSE = _tag("syn")
TAG_EXTERNAL = _tag("ext")

U64_MAX = (1 << 64) - 1


@intrinsic
def _mulhi(typingctx, a, b):
    """High word of the full 128-bit product of two uint64 values."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        return builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))

    return sig, codegen


@nb.njit(nogil=True, cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox block function on uint64 words."""
    for _ in range(10):
        h0 = _mulhi(_M0, c0)
        l0 = _M0 * c0
        h1 = _mulhi(_M1, c2)
        l1 = _M1 * c2
        c0, c1, c2, c3 = h1 ^ c1 ^ k0, l1, h0 ^ c3 ^ k1, l0
        k0 = k0 + _W0
        k1 = k1 + _W1
    return c0, c1, c2, c3


@nb.njit(nogil=True, cache=True)
def keyed_uniform(seed, tag, a, b):
    """Double in [0, 1) from the first output word, 53-bit resolution."""
    x0, _, _, _ = philox4x64(a, b, np.uint64(0), np.uint64(0), seed, tag)
    return (x0 >> _S11) * (1.0 / 9007199254740992.0)


@nb.njit(nogil=True, cache=True)
def keyed_uniform_array(seed, tag, a, b):
    out = np.empty(a.shape[0], dtype=np.float64)
    for i in range(a.shape[0]):
        out[i] = keyed_uniform(seed, tag, np.uint64(a[i]), np.uint64(b[i]))
    return out


def uniform(seed: int, tag: int, a, b):
    """Keyed uniforms for scalar or array ``a``, ``b`` (broadcast)."""
    a_arr, b_arr = np.broadcast_arrays(np.asarray(a, dtype=np.uint64),
                                       np.asarray(b, dtype=np.uint64))
    out = keyed_uniform_array(np.uint64(seed), np.uint64(tag),
                              np.ascontiguousarray(a_arr).ravel(),
                              np.ascontiguousarray(b_arr).ravel())
    if a_arr.ndim == 0:
        return float(out[0])
    return out.reshape(a_arr.shape)


# Poisson counts are drawn from 32-bit lanes: one Philox block serves eight
# consecutive timesteps of a neuron, keyed by (neuron, step // 8).
LANES_PER_BLOCK = 8


def poisson_thresholds(mean: float) -> np.ndarray:
    """Cumulative Poisson CDF scaled to 2**32, truncated once the tail vanishes.

    A 32-bit draw ``r`` yields the count ``#{k : r >= thresholds[k]}`` taken
    over the leading run of satisfied thresholds.
    """
    if mean < 0 or not math.isfinite(mean):
        raise ValueError("Poisson mean must be finite and >= 0")
    scale = float(1 << 32)
    if mean == 0:
        return np.array([1 << 32], dtype=np.uint64)
    out = []
    pmf = math.exp(-mean)
    cdf = 0.0
    k = 0
    while True:
        cdf += pmf
        thr = min(int(round(cdf * scale)), 1 << 32)
        out.append(thr)
        if thr >= (1 << 32) or (1.0 - cdf) * scale < 0.5 or k > 10 * mean + 200:
            break
        k += 1
        pmf *= mean / k
    out[-1] = 1 << 32
    return np.asarray(out, dtype=np.uint64)


@nb.njit(inline="always")
def lane32(words, lane):
    w = words[lane >> 1]
    if lane & 1:
        return w >> _S32
    return w & _LO


@nb.njit(nogil=True, cache=True)
def count_from_lane(r, thresholds):
    k = 0
    n = thresholds.shape[0]
    while k < n and r >= thresholds[k]:
        k += 1
    return k


@nb.njit(nogil=True, cache=True)
def poisson_count(seed, tag, neuron, step, thresholds):
    x0, x1, x2, x3 = philox4x64(np.uint64(neuron), np.uint64(step >> 3),
                                np.uint64(0), np.uint64(0), seed, tag)
    words = np.empty(4, dtype=np.uint64)
    words[0] = x0
    words[1] = x1
    words[2] = x2
    words[3] = x3
    return count_from_lane(lane32(words, step & 7), thresholds)
