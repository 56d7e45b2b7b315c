"""Closed-loop data collection and training/test set assembly.

Every sample is what the PLC decodes from the sensor response, so under
attack the level column carries the falsified reading.  Records carry a
provenance id ``<scenario>:<index>`` that identifies them across files.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import plant, protocol
from .plant import PlantParams, Thresholds
from .protocol import (
    ModbusFrame,
    ReadHoldingRegistersRequest,
    ReadHoldingRegistersResponse,
    RegisterMap,
    WriteSingleRegisterRequest,
    WriteSingleRegisterResponse,
)
from .wire import AttackConfig, Channel

FEATURES = ("level", "inflow", "outflow", "pump", "valve")
CSV_HEADER = FEATURES + ("label", "provenance")
NORMAL = "normal"
UNIT_ID = 1
MAX_WARMUP_STEPS = 1_000_000


class SafetyError(RuntimeError):
    """The unattacked baseline left the safe operating band."""


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    level: float
    inflow: float
    outflow: float
    pump: int
    valve: int
    label: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.pump not in (0, 1) or self.valve not in (0, 1):
            raise ValueError("pump and valve must be binary")

    @property
    def features(self) -> tuple[float, ...]:
        return (self.level, self.inflow, self.outflow, self.pump, self.valve)


def scenario_tag(intensity: float | None) -> str:
    return NORMAL if intensity is None else f"fdi-{intensity:.2f}"


def scenario_of(provenance: str) -> str:
    return provenance.rsplit(":", 1)[0]


@dataclass
class Dataset:
    records: list[SampleRecord] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.records) != len(self.provenance):
            raise ValueError(
                f"{len(self.records)} records but {len(self.provenance)} provenance tags"
            )

    def __len__(self) -> int:
        return len(self.records)

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.records + other.records, self.provenance + other.provenance)

    def features(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, len(FEATURES)))
        return np.array([r.features for r in self.records], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def take(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return Dataset([self.records[i] for i in idx], [self.provenance[i] for i in idx])

    def split(self, n: int) -> tuple["Dataset", "Dataset"]:
        """First ``n`` records and the rest, in collection order."""
        return self.take(range(n)), self.take(range(n, len(self)))

    def of_class(self, label: int) -> "Dataset":
        return self.take(i for i, r in enumerate(self.records) if r.label == label)

    def scenario_counts(self) -> Counter:
        return Counter(scenario_of(p) for p in self.provenance)


@dataclass(frozen=True)
class ScenarioConfig:
    """One closed-loop run.

    ``duration`` counts steps after the warm-up cycle; one record is taken
    every ``sampling_stride`` steps while the attack (if any) is active.
    """

    duration: int
    attack: Optional[AttackConfig] = None
    sampling_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.duration >= self.sampling_stride >= 1:
            raise ValueError("need duration >= sampling_stride >= 1")

    @property
    def tag(self) -> str:
        return scenario_tag(None if self.attack is None else self.attack.intensity)


class _Plc:
    """PLC side of the loop: polls the sensor block and commands actuators."""

    def __init__(self, channel: Channel, registers: RegisterMap):
        self.channel = channel
        self.registers = registers
        self.txn = 0
        self.start, self.count = registers.block

    def _next_txn(self) -> int:
        self.txn = (self.txn + 1) & 0xFFFF
        return self.txn

    def poll(self, state: plant.PlantState, step: int) -> SampleRecord:
        regs = self.registers
        txn = self._next_txn()
        request = protocol.encode(ModbusFrame(txn, UNIT_ID, ReadHoldingRegistersRequest(self.start, self.count)))
        request = self.channel.transmit(request, step, "plc->sensor")
        # sensor host answers whatever read it received
        req = protocol.decode(request).pdu
        values = [0] * req.count
        for address, value in (
            (regs.level_register, protocol.encode_level(state.level, regs.fixed_point_scale)),
            (regs.inflow_register, protocol.encode_level(state.inflow, regs.flow_scale)),
            (regs.outflow_register, protocol.encode_level(state.outflow, regs.flow_scale)),
            (regs.pump_coil_register, state.pump),
            (regs.valve_coil_register, state.valve),
        ):
            values[address - req.start_address] = value
        response = protocol.encode(ModbusFrame(txn, UNIT_ID, ReadHoldingRegistersResponse(tuple(values))))
        response = self.channel.transmit(response, step, "sensor->plc")

        got = protocol.decode(response).pdu.values
        at = lambda address: got[address - self.start]  # noqa: E731
        return SampleRecord(
            level=protocol.decode_level(at(regs.level_register), regs.fixed_point_scale),
            inflow=protocol.decode_level(at(regs.inflow_register), regs.flow_scale),
            outflow=protocol.decode_level(at(regs.outflow_register), regs.flow_scale),
            pump=1 if at(regs.pump_coil_register) else 0,
            valve=1 if at(regs.valve_coil_register) else 0,
        )

    def command(self, address: int, value: int, step: int) -> int:
        txn = self._next_txn()
        request = protocol.encode(ModbusFrame(txn, UNIT_ID, WriteSingleRegisterRequest(address, value)))
        request = self.channel.transmit(request, step, "plc->actuator")
        pdu = protocol.decode(request).pdu
        echo = protocol.encode(ModbusFrame(txn, UNIT_ID, WriteSingleRegisterResponse(pdu.address, pdu.value)))
        self.channel.transmit(echo, step, "actuator->plc")
        return pdu.value


def collect(
    scenario: ScenarioConfig,
    params: PlantParams,
    thresholds: Thresholds,
    registers: RegisterMap,
    channel: Channel | None = None,
) -> Dataset:
    """Run the loop and record the PLC's decoded view of the process.

    The first full fill/drain cycle is discarded.  The attack session starts
    right after it, mirroring an attacker joining established traffic.
    """
    params.check_fill_dominance(thresholds)
    channel = Channel() if channel is None else channel
    plc = _Plc(channel, registers)
    rng = np.random.default_rng(scenario.seed)
    tag = scenario.tag

    state = plant.initial_state(params)
    records: list[SampleRecord] = []
    provenance: list[str] = []
    transitions = 0
    record_from: int | None = None
    step = 0
    while True:
        if record_from is not None and step - record_from >= scenario.duration:
            break
        if record_from is None and step >= MAX_WARMUP_STEPS:
            raise RuntimeError("warm-up cycle never completed")
        state = plant.step(state, params)
        status = plant.safety_check(state.level, thresholds)
        if status is not plant.SafetyStatus.OK and scenario.attack is None:
            raise SafetyError(f"{status.value} at step {step} (level {state.level:.6f} m) in an unattacked run")

        sample = plc.poll(state, step)
        if record_from is not None:
            rel = step - record_from
            attacked = channel.attack_active(step)
            if rel % scenario.sampling_stride == 0 and (scenario.attack is None or attacked):
                records.append(
                    SampleRecord(sample.level, sample.inflow, sample.outflow, sample.pump, sample.valve, int(attacked))
                )
                provenance.append(f"{tag}:{len(provenance)}")

        current = (state.pump, state.valve)
        pump, valve = plant.control(sample.level, thresholds, current)
        if (pump, valve) != current:
            pump = plc.command(registers.pump_coil_register, pump, step)
            valve = plc.command(registers.valve_coil_register, valve, step)
            state = plant.actuate(state, pump, valve, params)
            if record_from is None:
                transitions += 1
                if transitions == 2:
                    record_from = step + 1
                    if scenario.attack is not None:
                        channel.start_attack(scenario.attack, rng, at_step=record_from)
        step += 1
    return Dataset(records, provenance)


def build_training_set(
    normal: Dataset,
    attacked: Dataset,
    size_per_class: int,
    rng: np.random.Generator,
) -> Dataset:
    """Balanced set of the first ``size_per_class`` records of each class, shuffled."""
    neg = normal.of_class(0)
    pos = attacked.of_class(1)
    for name, part in (("normal", neg), ("attacked", pos)):
        if len(part) < size_per_class:
            raise ValueError(f"{name} input has {len(part)} usable records, need {size_per_class}")
    combined = neg.split(size_per_class)[0] + pos.split(size_per_class)[0]
    return combined.take(rng.permutation(len(combined)))


def build_test_set(
    normal: Dataset,
    attacked_by_intensity: Mapping[float, Dataset],
    intensities: Sequence[float] = (0.01, 0.05, 0.10, 0.15, 0.20),
    normal_count: int = 500,
    per_intensity: int = 100,
    exclude: Iterable[Dataset] = (),
) -> Dataset:
    """Held-out set: ``normal_count`` normal records plus ``per_intensity`` per attack level.

    Any provenance id also present in an ``exclude`` dataset is an error.
    """
    parts = []
    neg = normal.of_class(0)
    if len(neg) < normal_count:
        raise ValueError(f"normal input has {len(neg)} records, need {normal_count}")
    parts.append(neg.split(normal_count)[0])
    for eps in intensities:
        match = [d for k, d in attacked_by_intensity.items() if abs(k - eps) < 1e-12]
        if not match:
            raise ValueError(f"no attacked dataset for intensity {eps}")
        pos = match[0].of_class(1)
        if len(pos) < per_intensity:
            raise ValueError(f"intensity {eps} has {len(pos)} records, need {per_intensity}")
        parts.append(pos.split(per_intensity)[0])
    test = sum(parts[1:], parts[0])
    seen = {p for d in exclude for p in d.provenance}
    overlap = seen.intersection(test.provenance)
    if overlap:
        raise ValueError(f"{len(overlap)} test records also appear in training data, e.g. {sorted(overlap)[0]}")
    return test


def _fmt(x: float) -> str:
    return format(x, ".9g")


def dumps(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r, p in zip(dataset.records, dataset.provenance):
        writer.writerow([_fmt(r.level), _fmt(r.inflow), _fmt(r.outflow), r.pump, r.valve, r.label, p])
    return buf.getvalue()


def save(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps(dataset))


def load(path: str | Path) -> Dataset:
    records, provenance = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise DatasetFormatError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise DatasetFormatError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                records.append(
                    SampleRecord(float(row[0]), float(row[1]), float(row[2]), int(row[3]), int(row[4]), int(row[5]))
                )
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
            provenance.append(row[6])
    return Dataset(records, provenance)
