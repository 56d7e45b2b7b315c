"""Acceptance criteria, each checked at its stated tolerance.

Every test records one ``criterion N: PASS|FAIL`` line, printed in the
terminal summary and echoed to stdout.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from tankids import pipeline, plant, protocol
from tankids.config import PipelineConfig
from tankids.evaluation import ConfusionMatrix, f1_score, metrics
from tankids.forest import best_split
from tankids.plant import PlantParams, SafetyStatus, Thresholds
from tankids.protocol import (
    ModbusFrame,
    ReadHoldingRegistersRequest,
    ReadHoldingRegistersResponse,
    WriteSingleRegisterRequest,
    WriteSingleRegisterResponse,
)

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_split, split_impurity

SEEDS = (0, 1, 2, 3, 4)
MODELS = ("1%", "10%", "20%")


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """One default-config pipeline run per seed, with wall-clock times."""
    out = {}
    for seed in SEEDS:
        path = tmp_path_factory.mktemp(f"seed{seed}")
        t0 = time.perf_counter()
        reports = pipeline.run_pipeline(replace(PipelineConfig(), seed=seed), path)
        out[seed] = (path, reports, time.perf_counter() - t0)
    return out


def test_criterion_1_f1_from_published_pairs():
    cases = [((0.709, 0.832), 0.766), ((0.894, 0.712), 0.792), ((1.0, 0.496), 0.663)]
    got = [f1_score(p, r) for (p, r), _ in cases]
    ok = all(abs(g - want) <= 0.001 for g, (_, want) in zip(got, cases))
    verdict(1, ok, "F1 " + ", ".join(f"{g:.4f} vs {w}" for g, (_, w) in zip(got, cases)))


def test_criterion_2_accuracy_from_back_solved_matrix():
    m = metrics(ConfusionMatrix(tp=248, tn=500, fp=0, fn=252))
    verdict(2, abs(m.accuracy - 0.748) <= 0.001, f"accuracy {m.accuracy:.4f} vs 0.748")


def _ordering(reports) -> bool:
    p = [reports[k].metrics.precision for k in MODELS]
    r = [reports[k].metrics.recall for k in MODELS]
    f = [reports[k].metrics.f1 for k in MODELS]
    return p[2] >= p[1] >= p[0] and r[0] >= r[1] >= r[2] and f[1] == max(f)


def _table(runs) -> str:
    rows = []
    for seed, (_, reports, _) in runs.items():
        cells = " ".join(
            f"{k}=P{reports[k].metrics.precision:.3f}/R{reports[k].metrics.recall:.3f}/F{reports[k].metrics.f1:.3f}"
            for k in MODELS
        )
        rows.append(f"  seed {seed}: {cells}")
    return "\n".join(rows)


def test_criterion_3_table_ordering(runs):
    hits = [seed for seed, (_, reports, _) in runs.items() if _ordering(reports)]
    print(_table(runs))
    verdict(3, len(hits) > len(runs) / 2, f"ordering holds in {len(hits)}/{len(runs)} seeds {hits}")


def test_criterion_4_model_20_precision(runs):
    precisions = {seed: reports["20%"].metrics.precision for seed, (_, reports, _) in runs.items()}
    hits = [s for s, p in precisions.items() if p >= 0.95]
    detail = ", ".join(f"{p:.3f}" for p in precisions.values())
    verdict(4, len(hits) > len(runs) / 2, f"precision(model 20%) >= 0.95 in {len(hits)}/{len(runs)} seeds ({detail})")


def test_criterion_5_recall_grows_with_intensity(runs):
    hits = []
    for seed, (_, reports, _) in runs.items():
        per_model = {k: reports[k].recall_by_scenario for k in MODELS}
        print(f"  seed {seed}: " + " ".join(
            f"{k} {per_model[k]['fdi-0.01']:.2f}->{per_model[k]['fdi-0.20']:.2f}" for k in MODELS
        ))
        if all(per_model[k]["fdi-0.20"] > per_model[k]["fdi-0.01"] for k in MODELS):
            hits.append(seed)
    verdict(5, len(hits) > len(runs) / 2, f"all three models hold in {len(hits)}/{len(runs)} seeds {hits}")


def test_criterion_6_split_oracle():
    g = np.random.default_rng(20_240_601)
    mismatches = 0
    for _ in range(200):
        n = int(g.integers(2, 31))
        d = int(g.integers(1, 5))
        # small integer grid forces plenty of ties and duplicate values
        X = g.integers(0, int(g.integers(2, 8)), size=(n, d)).astype(float)
        y = g.integers(0, 2, size=n)
        expected, parent = brute_force_split(X.tolist(), y.tolist())
        got = best_split(X, y, range(d))
        if expected is None or expected >= parent:
            mismatches += got is not None
        else:
            mismatches += got is None or split_impurity(X.tolist(), y.tolist(), got.feature, got.threshold) != expected
    verdict(6, mismatches == 0, f"{200 - mismatches}/200 datasets match exhaustive enumeration exactly")


def test_criterion_7_plant_invariants():
    params, thr = PlantParams(), Thresholds()
    worst_balance = 0.0
    negative = alarms = 0
    switches = 0
    state = plant.initial_state(params)
    for k in range(1_000_000):
        before = state
        state = plant.step(before, params)
        expected = before.level + (state.inflow - state.outflow) * params.dt / params.tank_section
        worst_balance = max(worst_balance, abs(state.level - max(expected, 0.0)))
        negative += state.level < 0
        if switches >= 2 and plant.safety_check(state.level, thr) is not SafetyStatus.OK:
            alarms += 1
        pump, valve = plant.control(state.level, thr, (state.pump, state.valve))
        if (pump, valve) != (state.pump, state.valve):
            switches += 1
            state = plant.actuate(state, pump, valve, params)
    ok = worst_balance <= 1e-12 and negative == 0 and alarms == 0 and switches > 2
    verdict(
        7, ok,
        f"10^6 steps: max balance error {worst_balance:.1e}, negative levels {negative}, "
        f"alarms after warm-up {alarms}, switches {switches}",
    )


def _random_frame(g) -> ModbusFrame:
    kind = int(g.integers(4))
    u16 = lambda: int(g.integers(0, 65536))  # noqa: E731
    if kind == 0:
        pdu = ReadHoldingRegistersRequest(u16(), int(g.integers(1, 126)))
    elif kind == 1:
        pdu = ReadHoldingRegistersResponse(tuple(int(v) for v in g.integers(0, 65536, size=int(g.integers(1, 126)))))
    elif kind == 2:
        pdu = WriteSingleRegisterRequest(u16(), u16())
    else:
        pdu = WriteSingleRegisterResponse(u16(), u16())
    return ModbusFrame(u16(), int(g.integers(0, 256)), pdu)


def test_criterion_8_protocol_roundtrip():
    g = np.random.default_rng(8)
    failures = 0
    for _ in range(10_000):
        frame = _random_frame(g)
        failures += protocol.decode(protocol.encode(frame), response=frame.is_response) != frame
    hand = [
        (ModbusFrame(1, 1, ReadHoldingRegistersRequest(0, 1)), "00 01 00 00 00 06 01 03 00 00 00 01"),
        (ModbusFrame(1, 1, ReadHoldingRegistersResponse((500,))), "00 01 00 00 00 05 01 03 02 01 F4"),
    ]
    hand_ok = all(
        protocol.encode(f) == bytes.fromhex(h) and protocol.decode(bytes.fromhex(h)) == f for f, h in hand
    )
    verdict(8, failures == 0 and hand_ok, f"{10_000 - failures}/10000 random frames round-trip, hand bytes match: {hand_ok}")


def _without_times(root: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name == "manifest.txt":
            data = b"".join(line for line in data.splitlines(keepends=True) if not line.startswith(b"time."))
        out[p.relative_to(root).as_posix()] = data
    return out


def test_criterion_9_determinism(runs, tmp_path):
    first, _, _ = runs[SEEDS[0]]
    pipeline.run_pipeline(replace(PipelineConfig(), seed=SEEDS[0]), tmp_path)
    a, b = _without_times(first), _without_times(tmp_path)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    verdict(9, not differing, f"{len(a)} files compared, differing: {differing or 'none'}")


def test_criterion_10_runtime(runs):
    seconds = [t for _, _, t in runs.values()]
    verdict(10, max(seconds) < 60, "pipeline wall time per seed: " + ", ".join(f"{s:.1f}s" for s in seconds))
