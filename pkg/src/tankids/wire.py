"""In-process channel between the field devices and the PLC.

A man-in-the-middle sits on the channel once an attack session starts.  It
decodes every frame, rescales the targeted sensor registers of read
responses by ``1 +/- intensity`` and re-encodes the frame.  Everything else
is forwarded verbatim.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import protocol
from .protocol import ModbusFrame, ReadHoldingRegistersRequest, ReadHoldingRegistersResponse

log = logging.getLogger(__name__)


class SignPolicy(str, enum.Enum):
    RANDOM_PER_FRAME = "random_per_frame"
    ALWAYS_POSITIVE = "always_positive"
    ALWAYS_NEGATIVE = "always_negative"


@dataclass(frozen=True)
class AttackConfig:
    """False-data-injection settings.

    ``active_window`` is ``(start, end)`` in steps counted from the moment the
    session starts; ``end=None`` keeps the attack on until it is stopped.
    """

    intensity: float
    sign_policy: SignPolicy = SignPolicy.RANDOM_PER_FRAME
    target: frozenset[int] = frozenset({0})
    active_window: tuple[int, Optional[int]] = (0, None)

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity!r}")
        object.__setattr__(self, "sign_policy", SignPolicy(self.sign_policy))
        object.__setattr__(self, "target", frozenset(self.target))
        if not self.target:
            raise ValueError("attack target must name at least one register")
        start, end = self.active_window
        if start < 0 or (end is not None and end < start):
            raise ValueError(f"invalid active window {self.active_window!r}")

    def is_active(self, offset: int) -> bool:
        start, end = self.active_window
        return offset >= start and (end is None or offset < end)


def _draw_sign(policy: SignPolicy, rng: np.random.Generator) -> int:
    if policy is SignPolicy.ALWAYS_POSITIVE:
        return 1
    if policy is SignPolicy.ALWAYS_NEGATIVE:
        return -1
    return 1 if rng.random() < 0.5 else -1


def fdi_modify(
    frame: ModbusFrame,
    config: AttackConfig,
    rng: np.random.Generator,
    start_address: int = 0,
) -> ModbusFrame:
    """Scale targeted register values of a read response.

    ``start_address`` is the first register of the read, learned from the
    request the attacker saw go by.  One sign is drawn per frame.
    """
    pdu = frame.pdu
    if not isinstance(pdu, ReadHoldingRegistersResponse):
        return frame
    hit = [i for i in range(len(pdu.values)) if start_address + i in config.target]
    if not hit:
        return frame
    factor = 1.0 + _draw_sign(config.sign_policy, rng) * config.intensity
    values = list(pdu.values)
    for i in hit:
        scaled = math.floor(values[i] * factor + 0.5)
        values[i] = min(max(scaled, 0), protocol.U16_MAX)
    return ModbusFrame(frame.transaction_id, frame.unit_id, ReadHoldingRegistersResponse(tuple(values)))


@dataclass(frozen=True)
class LogEntry:
    step: int
    direction: str
    original: bytes
    delivered: bytes

    @property
    def modified(self) -> bool:
        return self.original != self.delivered


def _register_values(data: bytes) -> str:
    try:
        frame = protocol.decode(data)
    except protocol.ModbusError:
        return ""
    if isinstance(frame.pdu, ReadHoldingRegistersResponse):
        return ";".join(str(v) for v in frame.pdu.values)
    return ""


@dataclass
class Channel:
    """Point-to-point link carrying encoded Modbus frames.

    Not thread-safe; one simulation loop owns a channel.
    """

    log: list[LogEntry] = field(default_factory=list)
    _attack: Optional[AttackConfig] = None
    _rng: Optional[np.random.Generator] = None
    _session_start: int = 0
    # transaction id -> start address of reads in flight
    _pending_reads: dict[int, int] = field(default_factory=dict)

    @property
    def attacking(self) -> bool:
        return self._attack is not None

    def start_attack(self, config: AttackConfig, rng: np.random.Generator, at_step: int = 0) -> None:
        if self._attack is not None:
            raise RuntimeError("an attack session is already active")
        self._attack = config
        self._rng = rng
        self._session_start = at_step

    def stop_attack(self) -> list[LogEntry]:
        self._attack = None
        self._rng = None
        return list(self.log)

    def attack_active(self, step: int) -> bool:
        return self._attack is not None and self._attack.is_active(step - self._session_start)

    def transmit(self, data: bytes, step: int, direction: str = "sensor->plc") -> bytes:
        delivered = data
        if self._attack is not None:
            delivered = self._intercept(data, step)
        self.log.append(LogEntry(step, direction, bytes(data), bytes(delivered)))
        return delivered

    def _intercept(self, data: bytes, step: int) -> bytes:
        try:
            frame = protocol.decode(data)
        except protocol.ModbusError as exc:
            log.warning("step %d: forwarding undecodable frame verbatim (%s)", step, exc)
            return data
        if isinstance(frame.pdu, ReadHoldingRegistersRequest):
            self._pending_reads[frame.transaction_id] = frame.pdu.start_address
            return data
        if not isinstance(frame.pdu, ReadHoldingRegistersResponse):
            return data
        start = self._pending_reads.pop(frame.transaction_id, 0)
        if not self._attack.is_active(step - self._session_start):
            return data
        return protocol.encode(fdi_modify(frame, self._attack, self._rng, start))

    def export_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "direction", "modified", "original_value", "delivered_value"])
            for e in self.log:
                writer.writerow(
                    [e.step, e.direction, int(e.modified), _register_values(e.original), _register_values(e.delivered)]
                )
