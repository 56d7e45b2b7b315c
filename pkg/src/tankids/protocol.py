"""Modbus/TCP framing for the subset used between field devices and the PLC.

Only function codes 0x03 (read holding registers) and 0x06 (write single
register) are supported.  All multi-byte fields are big-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

READ_HOLDING_REGISTERS = 0x03
WRITE_SINGLE_REGISTER = 0x06

MBAP_HEADER = struct.Struct(">HHHB")  # transaction id, protocol id, length, unit id
MAX_READ_COUNT = 125
U16_MAX = 0xFFFF


class ModbusError(ValueError):
    """Base class for framing errors."""


class EncodeError(ModbusError):
    pass


class TruncatedFrameError(ModbusError):
    pass


class ProtocolIdError(ModbusError):
    pass


class LengthMismatchError(ModbusError):
    pass


class UnsupportedFunctionError(ModbusError):
    pass


class RegisterRangeError(ModbusError):
    pass


@dataclass(frozen=True)
class ReadHoldingRegistersRequest:
    start_address: int
    count: int


@dataclass(frozen=True)
class ReadHoldingRegistersResponse:
    values: tuple[int, ...]


@dataclass(frozen=True)
class WriteSingleRegisterRequest:
    address: int
    value: int


@dataclass(frozen=True)
class WriteSingleRegisterResponse:
    address: int
    value: int


Pdu = Union[
    ReadHoldingRegistersRequest,
    ReadHoldingRegistersResponse,
    WriteSingleRegisterRequest,
    WriteSingleRegisterResponse,
]


@dataclass(frozen=True)
class ModbusFrame:
    transaction_id: int
    unit_id: int
    pdu: Pdu
    protocol_id: int = 0

    @property
    def is_response(self) -> bool:
        return isinstance(self.pdu, (ReadHoldingRegistersResponse, WriteSingleRegisterResponse))


@dataclass(frozen=True)
class RegisterMap:
    """Holding-register layout of the sensor host, with fixed-point scales."""

    level_register: int = 0
    inflow_register: int = 1
    outflow_register: int = 2
    pump_coil_register: int = 3
    valve_coil_register: int = 4
    fixed_point_scale: int = 1000
    flow_scale: int = 500

    def __post_init__(self):
        addresses = self.addresses
        if len(set(addresses)) != len(addresses):
            raise ValueError(f"register addresses must be distinct, got {addresses}")
        if any(not 0 <= a <= U16_MAX for a in addresses):
            raise ValueError("register addresses must fit in 16 bits")
        if self.fixed_point_scale <= 0 or self.flow_scale <= 0:
            raise ValueError("fixed-point scales must be positive")

    @property
    def addresses(self) -> tuple[int, ...]:
        return (
            self.level_register,
            self.inflow_register,
            self.outflow_register,
            self.pump_coil_register,
            self.valve_coil_register,
        )

    @property
    def block(self) -> tuple[int, int]:
        """(start, count) of the contiguous read covering every register."""
        lo, hi = min(self.addresses), max(self.addresses)
        return lo, hi - lo + 1


def _check_u16(name: str, value: int) -> None:
    if not 0 <= value <= U16_MAX:
        raise EncodeError(f"{name}={value!r} does not fit in an unsigned 16-bit field")


def _encode_pdu(pdu: Pdu) -> bytes:
    if isinstance(pdu, ReadHoldingRegistersRequest):
        if not 1 <= pdu.count <= MAX_READ_COUNT:
            raise EncodeError(f"register count {pdu.count} outside 1..{MAX_READ_COUNT}")
        _check_u16("start_address", pdu.start_address)
        return struct.pack(">BHH", READ_HOLDING_REGISTERS, pdu.start_address, pdu.count)
    if isinstance(pdu, ReadHoldingRegistersResponse):
        if not 1 <= len(pdu.values) <= MAX_READ_COUNT:
            raise EncodeError(f"register list of length {len(pdu.values)} outside 1..{MAX_READ_COUNT}")
        for v in pdu.values:
            _check_u16("register value", v)
        n = len(pdu.values)
        return struct.pack(f">BB{n}H", READ_HOLDING_REGISTERS, 2 * n, *pdu.values)
    if isinstance(pdu, (WriteSingleRegisterRequest, WriteSingleRegisterResponse)):
        _check_u16("address", pdu.address)
        _check_u16("value", pdu.value)
        return struct.pack(">BHH", WRITE_SINGLE_REGISTER, pdu.address, pdu.value)
    raise EncodeError(f"unsupported PDU type {type(pdu).__name__}")


def encode(frame: ModbusFrame) -> bytes:
    """Serialize a frame: MBAP header, function code, PDU body."""
    if frame.protocol_id != 0:
        raise EncodeError(f"protocol id must be 0, got {frame.protocol_id}")
    _check_u16("transaction_id", frame.transaction_id)
    if not 0 <= frame.unit_id <= 0xFF:
        raise EncodeError(f"unit_id={frame.unit_id!r} does not fit in 8 bits")
    body = _encode_pdu(frame.pdu)
    return MBAP_HEADER.pack(frame.transaction_id, 0, 1 + len(body), frame.unit_id) + body


def frame_length(data: bytes) -> int:
    """Total byte length of the frame at the start of ``data`` per its MBAP header."""
    if len(data) < MBAP_HEADER.size:
        raise TruncatedFrameError(f"need {MBAP_HEADER.size} header bytes, got {len(data)}")
    _, _, length, _ = MBAP_HEADER.unpack_from(data)
    return 6 + length


def decode_with_rest(data: bytes) -> tuple[ModbusFrame, bytes]:
    """Decode one frame and return it with any bytes following it."""
    if len(data) < MBAP_HEADER.size + 1:
        raise TruncatedFrameError(f"frame needs at least 8 bytes, got {len(data)}")
    txn, proto, length, unit = MBAP_HEADER.unpack_from(data)
    if proto != 0:
        raise ProtocolIdError(f"protocol id {proto} != 0")
    if length < 2:
        raise LengthMismatchError(f"declared length {length} leaves no room for a function code")
    end = 6 + length
    if len(data) < end:
        raise TruncatedFrameError(f"header declares {end} bytes, buffer holds {len(data)}")
    pdu_bytes = bytes(data[7:end])
    rest = bytes(data[end:])
    fc = pdu_bytes[0]

    if fc == READ_HOLDING_REGISTERS:
        # Request PDUs are 5 bytes; response PDUs are 2 + 2n bytes, always even.
        if len(pdu_bytes) == 5:
            start, count = struct.unpack(">HH", pdu_bytes[1:])
            pdu: Pdu = ReadHoldingRegistersRequest(start, count)
        else:
            byte_count = pdu_bytes[1] if len(pdu_bytes) > 1 else -1
            if byte_count < 2 or byte_count % 2 or len(pdu_bytes) != 2 + byte_count:
                raise LengthMismatchError(
                    f"byte count {byte_count} inconsistent with PDU length {len(pdu_bytes)}"
                )
            n = byte_count // 2
            pdu = ReadHoldingRegistersResponse(struct.unpack(f">{n}H", pdu_bytes[2:]))
    elif fc == WRITE_SINGLE_REGISTER:
        if len(pdu_bytes) != 5:
            raise LengthMismatchError(f"write-single PDU must be 5 bytes, got {len(pdu_bytes)}")
        address, value = struct.unpack(">HH", pdu_bytes[1:])
        # Request and echo response are byte-identical; direction disambiguates.
        pdu = WriteSingleRegisterRequest(address, value)
    else:
        raise UnsupportedFunctionError(f"function code 0x{fc:02X} not supported")
    return ModbusFrame(txn, unit, pdu), rest


def decode(data: bytes, *, response: bool = False) -> ModbusFrame:
    """Inverse of :func:`encode`.

    A write-single response echoes its request byte for byte, so
    ``response`` says which of the two to build.  Trailing bytes raise
    :class:`LengthMismatchError`; use :func:`decode_with_rest` to keep them.
    """
    frame, rest = decode_with_rest(data)
    if rest:
        raise LengthMismatchError(f"{len(rest)} trailing bytes after declared length")
    pdu = frame.pdu
    if response and isinstance(pdu, WriteSingleRegisterRequest):
        frame = ModbusFrame(frame.transaction_id, frame.unit_id, WriteSingleRegisterResponse(pdu.address, pdu.value))
    return frame


def encode_level(level: float, scale: int = 1000) -> int:
    """Fixed-point carriage of a non-negative analog value in one register."""
    raw = level * scale
    if not 0 <= raw <= U16_MAX or raw != raw:
        raise RegisterRangeError(f"{level!r} * {scale} outside the register range")
    value = round(raw)
    if value > U16_MAX:
        raise RegisterRangeError(f"{level!r} * {scale} rounds past the register range")
    return value


def decode_level(value: int, scale: int = 1000) -> float:
    if not 0 <= value <= U16_MAX:
        raise RegisterRangeError(f"register value {value!r} outside 0..65535")
    return value / scale
