"""SpikeMessage wire format.

Header (16 bytes, little-endian): sender id u32, window start u64, spike
count u32. Payload: ``count`` pairs of (neuron id u64, timestep u64).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HEADER = struct.Struct("<IQI")
PAIR = np.dtype([("neuron", "<u8"), ("step", "<u8")])


class FrameError(ValueError):
    def __init__(self, sender: int | None, offset: int, reason: str):
        who = "unknown sender" if sender is None else f"worker {sender}"
        super().__init__(f"malformed frame from {who} at byte {offset}: {reason}")
        self.sender = sender
        self.offset = offset


@dataclass
class SpikeMessage:
    sender: int
    window_start: int
    neurons: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return int(self.neurons.size)


def encode(msg: SpikeMessage) -> bytes:
    payload = np.empty(len(msg), dtype=PAIR)
    payload["neuron"] = msg.neurons
    payload["step"] = msg.steps
    return HEADER.pack(msg.sender, msg.window_start, len(msg)) + payload.tobytes()


def decode(data: bytes, window: int | None = None, *, sender: int | None = None,
           base_offset: int = 0) -> SpikeMessage:
    """Parse and validate one frame.

    ``sender`` is the peer the frame is expected from; ``base_offset`` is
    the frame's position in its stream, used in error reports.
    """
    if len(data) < HEADER.size:
        raise FrameError(sender, base_offset, f"{len(data)} bytes is shorter than the header")
    who, start, count = HEADER.unpack_from(data)
    if sender is not None and who != sender:
        raise FrameError(sender, base_offset, f"header names sender {who}")
    expected = HEADER.size + count * PAIR.itemsize
    if len(data) != expected:
        raise FrameError(who, base_offset + HEADER.size,
                         f"count {count} needs {expected} bytes, frame has {len(data)}")
    pairs = np.frombuffer(data, dtype=PAIR, offset=HEADER.size)
    steps = pairs["step"].astype(np.int64)
    if window is not None and count:
        bad = np.flatnonzero((steps < start) | (steps >= start + window))
        if bad.size:
            raise FrameError(who, base_offset + HEADER.size + int(bad[0]) * PAIR.itemsize,
                             f"timestep {steps[bad[0]]} outside window "
                             f"[{start}, {start + window})")
    return SpikeMessage(who, start, pairs["neuron"].astype(np.int64), steps)
