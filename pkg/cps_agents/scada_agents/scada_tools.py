"""
SCADA framing
Modbus/TCP application frames and the fixed-point register codec
"""

import struct
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from data_models import FrameDigest
from errors import (
    FrameDecodeError,
    LengthMismatchError,
    ProtocolIdError,
    RegisterCountError,
    ScadaEncodingError,
    ShortBufferError,
    UnknownFunctionError,
)

HEADER = struct.Struct('>HHHB')  # transaction id, protocol id, length, unit id
HEADER_SIZE = HEADER.size
FC_READ_HOLDING = 0x03
FC_WRITE_MULTIPLE = 0x10
EXCEPTION_FLAG = 0x80
MAX_REGISTERS = 123


class FunctionKind(Enum):
    READ_HOLDING_REQUEST = "ReadHoldingRegistersRequest"
    READ_HOLDING_RESPONSE = "ReadHoldingRegistersResponse"
    WRITE_MULTIPLE_REQUEST = "WriteMultipleRegistersRequest"
    WRITE_MULTIPLE_RESPONSE = "WriteMultipleRegistersResponse"
    EXCEPTION_RESPONSE = "ExceptionResponse"


@dataclass(frozen=True)
class ScadaFrame:
    """
    One Modbus application frame

    Only the fields carried on the wire for `function` may be set; the
    others keep their defaults so that every valid frame round-trips.
    """
    transaction_id: int
    unit_id: int
    function: FunctionKind
    start_address: int = 0
    quantity: int = 0
    register_values: Tuple[int, ...] = ()
    exception_code: int = 0
    request_function: int = 0


def read_request(transaction_id: int, unit_id: int, start_address: int, quantity: int) -> ScadaFrame:
    return ScadaFrame(transaction_id, unit_id, FunctionKind.READ_HOLDING_REQUEST,
                      start_address=start_address, quantity=quantity)


def read_response(transaction_id: int, unit_id: int, values: Sequence[int]) -> ScadaFrame:
    return ScadaFrame(transaction_id, unit_id, FunctionKind.READ_HOLDING_RESPONSE,
                      register_values=tuple(values))


def write_request(transaction_id: int, unit_id: int, start_address: int, values: Sequence[int]) -> ScadaFrame:
    return ScadaFrame(transaction_id, unit_id, FunctionKind.WRITE_MULTIPLE_REQUEST,
                      start_address=start_address, register_values=tuple(values))


def write_response(transaction_id: int, unit_id: int, start_address: int, quantity: int) -> ScadaFrame:
    return ScadaFrame(transaction_id, unit_id, FunctionKind.WRITE_MULTIPLE_RESPONSE,
                      start_address=start_address, quantity=quantity)


def exception_response(transaction_id: int, unit_id: int, request_function: int, exception_code: int) -> ScadaFrame:
    return ScadaFrame(transaction_id, unit_id, FunctionKind.EXCEPTION_RESPONSE,
                      exception_code=exception_code, request_function=request_function)


def _check_range(name: str, value: int, upper: int) -> None:
    if not isinstance(value, (int, np.integer)) or not 0 <= value <= upper:
        raise ScadaEncodingError(f'{name}={value!r} outside [0, {upper}]')


def _check_count(count: int) -> None:
    if not 1 <= count <= MAX_REGISTERS:
        raise ScadaEncodingError(f'register count {count} outside [1, {MAX_REGISTERS}]')


def _check_unused(frame: ScadaFrame, *names: str) -> None:
    defaults = ScadaFrame(0, 0, frame.function)
    for name in names:
        if getattr(frame, name) != getattr(defaults, name):
            raise ScadaEncodingError(f'{name} is not carried by {frame.function.value}')


def _encode_pdu(frame: ScadaFrame) -> bytes:
    kind = frame.function
    if kind is FunctionKind.READ_HOLDING_REQUEST:
        _check_unused(frame, 'register_values', 'exception_code', 'request_function')
        _check_range('start_address', frame.start_address, 0xFFFF)
        _check_count(frame.quantity)
        return struct.pack('>BHH', FC_READ_HOLDING, frame.start_address, frame.quantity)

    if kind is FunctionKind.READ_HOLDING_RESPONSE:
        _check_unused(frame, 'start_address', 'quantity', 'exception_code', 'request_function')
        values = frame.register_values
        _check_count(len(values))
        for v in values:
            _check_range('register value', v, 0xFFFF)
        return struct.pack(f'>BB{len(values)}H', FC_READ_HOLDING, 2 * len(values), *values)

    if kind is FunctionKind.WRITE_MULTIPLE_REQUEST:
        _check_unused(frame, 'quantity', 'exception_code', 'request_function')
        _check_range('start_address', frame.start_address, 0xFFFF)
        values = frame.register_values
        _check_count(len(values))
        for v in values:
            _check_range('register value', v, 0xFFFF)
        return struct.pack(f'>BHHB{len(values)}H', FC_WRITE_MULTIPLE, frame.start_address,
                           len(values), 2 * len(values), *values)

    if kind is FunctionKind.WRITE_MULTIPLE_RESPONSE:
        _check_unused(frame, 'register_values', 'exception_code', 'request_function')
        _check_range('start_address', frame.start_address, 0xFFFF)
        _check_count(frame.quantity)
        return struct.pack('>BHH', FC_WRITE_MULTIPLE, frame.start_address, frame.quantity)

    _check_unused(frame, 'start_address', 'quantity', 'register_values')
    if frame.request_function not in (FC_READ_HOLDING, FC_WRITE_MULTIPLE):
        raise ScadaEncodingError(f'exception for unsupported function 0x{frame.request_function:02X}')
    _check_range('exception_code', frame.exception_code, 0xFF)
    return struct.pack('>BB', frame.request_function | EXCEPTION_FLAG, frame.exception_code)


def encode_frame(frame: ScadaFrame) -> bytes:
    """
    Serialize a frame to Modbus/TCP bytes

    Args:
        frame: Frame to encode

    Returns:
        MBAP header followed by function code and body, big-endian
    """
    _check_range('transaction_id', frame.transaction_id, 0xFFFF)
    _check_range('unit_id', frame.unit_id, 0xFF)
    pdu = _encode_pdu(frame)
    return HEADER.pack(frame.transaction_id, 0, len(pdu) + 1, frame.unit_id) + pdu


def _decode_registers(body: bytes, offset: int, count: int) -> Tuple[int, ...]:
    return struct.unpack_from(f'>{count}H', body, offset)


def decode_frame(data: bytes) -> ScadaFrame:
    """
    Parse Modbus/TCP bytes into a frame

    Raises a FrameDecodeError subclass naming the offending byte offset.
    """
    data = bytes(data)
    if len(data) < HEADER_SIZE + 1:
        raise ShortBufferError('buffer shorter than header and function code', len(data))

    tid, protocol_id, length, unit_id = HEADER.unpack_from(data, 0)
    if protocol_id != 0:
        raise ProtocolIdError(f'protocol id {protocol_id} is not 0', 2)
    if length < 2:
        raise LengthMismatchError(f'length field {length} too small', 4)
    expected_total = HEADER_SIZE - 1 + length
    if len(data) < expected_total:
        raise ShortBufferError(f'length field announces {expected_total} bytes', len(data))
    if len(data) > expected_total:
        raise LengthMismatchError(f'{len(data) - expected_total} trailing bytes beyond length field', expected_total)

    fc = data[HEADER_SIZE]
    body = data[HEADER_SIZE + 1:]
    body_at = HEADER_SIZE + 1

    if fc & EXCEPTION_FLAG:
        request_function = fc & ~EXCEPTION_FLAG & 0xFF
        if request_function not in (FC_READ_HOLDING, FC_WRITE_MULTIPLE):
            raise UnknownFunctionError(f'unknown function code 0x{fc:02X}', HEADER_SIZE)
        if len(body) != 1:
            raise LengthMismatchError('exception body must be one byte', body_at)
        return exception_response(tid, unit_id, request_function, body[0])

    if fc == FC_READ_HOLDING:
        if len(body) == 4:
            start, quantity = struct.unpack_from('>HH', body, 0)
            if not 1 <= quantity <= MAX_REGISTERS:
                raise RegisterCountError(f'quantity {quantity} outside [1, {MAX_REGISTERS}]', body_at + 2)
            return read_request(tid, unit_id, start, quantity)
        if len(body) % 2 == 1:
            byte_count = body[0]
            if byte_count != len(body) - 1:
                raise RegisterCountError(f'byte count {byte_count} disagrees with body', body_at)
            count = byte_count // 2
            if not 1 <= count <= MAX_REGISTERS:
                raise RegisterCountError(f'register count {count} outside [1, {MAX_REGISTERS}]', body_at)
            return read_response(tid, unit_id, _decode_registers(body, 1, count))
        raise LengthMismatchError(f'body of {len(body)} bytes fits no read frame', body_at)

    if fc == FC_WRITE_MULTIPLE:
        if len(body) == 4:
            start, quantity = struct.unpack_from('>HH', body, 0)
            if not 1 <= quantity <= MAX_REGISTERS:
                raise RegisterCountError(f'quantity {quantity} outside [1, {MAX_REGISTERS}]', body_at + 2)
            return write_response(tid, unit_id, start, quantity)
        if len(body) >= 5 and len(body) % 2 == 1:
            start, quantity, byte_count = struct.unpack_from('>HHB', body, 0)
            if not 1 <= quantity <= MAX_REGISTERS:
                raise RegisterCountError(f'quantity {quantity} outside [1, {MAX_REGISTERS}]', body_at + 2)
            if byte_count != 2 * quantity:
                raise RegisterCountError(f'byte count {byte_count} != 2 x {quantity}', body_at + 4)
            if len(body) != 5 + byte_count:
                raise LengthMismatchError(f'body carries {len(body) - 5} value bytes, expected {byte_count}',
                                          body_at + 5)
            return write_request(tid, unit_id, start, _decode_registers(body, 5, quantity))
        raise LengthMismatchError(f'body of {len(body)} bytes fits no write frame', body_at)

    raise UnknownFunctionError(f'unknown function code 0x{fc:02X}', HEADER_SIZE)


@dataclass(frozen=True)
class RegisterCodec:
    """Fixed-point mapping: value = offset + count * scale"""
    scale: float = 0.001
    offset: float = -32.768
    registers_per_value: int = 1

    def __post_init__(self):
        if self.scale <= 0:
            raise ScadaEncodingError(f'codec scale must be positive, got {self.scale}')
        if self.registers_per_value not in (1, 2):
            raise ScadaEncodingError(f'registers_per_value must be 1 or 2, got {self.registers_per_value}')

    @property
    def max_count(self) -> int:
        return (1 << (16 * self.registers_per_value)) - 1

    @property
    def lower(self) -> float:
        return self.offset

    @property
    def upper(self) -> float:
        return self.offset + self.max_count * self.scale

    def to_count(self, value: float) -> int:
        if not np.isfinite(value):
            raise ScadaEncodingError(f'value {value} is not finite')
        count = int(round((float(value) - self.offset) / self.scale))
        if not 0 <= count <= self.max_count:
            raise ScadaEncodingError(
                f'value {value} outside representable range [{self.lower}, {self.upper}]'
            )
        return count

    def from_count(self, count: int) -> float:
        return self.offset + count * self.scale

    def clamp(self, value: float) -> Tuple[float, bool]:
        """Clip a value into the representable range; reports whether it moved"""
        clipped = min(max(float(value), self.lower), self.upper)
        return clipped, clipped != float(value)


def pack_measurement(y: Sequence[float], codec: RegisterCodec) -> List[int]:
    """Encode a real vector as registers; two-register values put the high word first"""
    registers: List[int] = []
    for value in np.atleast_1d(np.asarray(y, dtype=float)):
        count = codec.to_count(value)
        if codec.registers_per_value == 2:
            registers.extend(((count >> 16) & 0xFFFF, count & 0xFFFF))
        else:
            registers.append(count)
    return registers


def unpack_measurement(registers: Sequence[int], codec: RegisterCodec) -> np.ndarray:
    width = codec.registers_per_value
    if len(registers) % width:
        raise ScadaEncodingError(f'{len(registers)} registers do not split into {width}-register values')
    values = []
    for i in range(0, len(registers), width):
        if width == 2:
            count = (registers[i] << 16) | registers[i + 1]
        else:
            count = registers[i]
        values.append(codec.from_count(count))
    return np.asarray(values, dtype=float)


def digest_payload(payload: bytes) -> FrameDigest:
    """What a probe reads from a SCADA payload"""
    try:
        frame = decode_frame(payload)
    except FrameDecodeError as exc:
        return FrameDigest(error=exc.kind)
    return FrameDigest(
        function=frame.function.value,
        transaction_id=frame.transaction_id,
        registers=tuple(frame.register_values)
    )
