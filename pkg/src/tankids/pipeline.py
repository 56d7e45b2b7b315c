"""Experiment stages: collect datasets, train the three models, evaluate them.

Every stage reads and writes plain files under one output directory, so the
stages can run one at a time or chained by :func:`run_pipeline`.

Layout::

    data/normal-train.csv  data/normal-test.csv
    data/fdi-<eps>-train.csv      (training intensities)
    data/fdi-<eps>-test.csv       (every testing intensity)
    models/model-<n>pct.json
    grid/grid-<n>pct.csv
    reports/report-<n>pct.txt
    reports/comparison.csv  reports/comparison.txt
    manifest.txt
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import dataset, evaluation, forest, plant
from .config import PipelineConfig, derive_seed
from .dataset import Dataset, ScenarioConfig
from .wire import AttackConfig

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DATASET_FORMAT_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def model_name(eps: float) -> str:
    return f"{round(eps * 100):g}%"


def _stem(eps: float) -> str:
    return f"{round(eps * 100):g}pct"


def data_path(out: Path, tag: str, part: str) -> Path:
    return out / "data" / f"{tag}-{part}.csv"


def simulate_trajectory(cfg: PipelineConfig, steps: int, path: str | Path) -> None:
    """Write the true closed-loop trajectory, one row per plant step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "time", "level", "inflow", "outflow", "pump", "valve", "safety"])
        for k, s in enumerate(plant.simulate(cfg.plant, cfg.thresholds, steps)):
            status = plant.safety_check(s.level, cfg.thresholds)
            writer.writerow(
                [k, format(s.time, ".9g"), format(s.level, ".9g"), format(s.inflow, ".9g"),
                 format(s.outflow, ".9g"), s.pump, s.valve, status.value]
            )


def _attack(cfg: PipelineConfig, eps: float) -> AttackConfig:
    return AttackConfig(eps, cfg.sign_policy, frozenset(cfg.attack_target))


def collect(cfg: PipelineConfig, out: Path) -> list[Path]:
    out = Path(out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    written = []

    def run(tag: str, attack: AttackConfig | None, n: int) -> Dataset:
        scenario = ScenarioConfig(
            duration=n * cfg.sampling_stride,
            attack=attack,
            sampling_stride=cfg.sampling_stride,
            seed=derive_seed(cfg.seed, f"scenario/{tag}"),
        )
        d = dataset.collect(scenario, cfg.plant, cfg.thresholds, cfg.registers)
        if len(d) != n:
            raise AssertionError(f"scenario {tag} produced {len(d)} records, expected {n}")
        return d

    def save(d: Dataset, tag: str, part: str) -> None:
        path = data_path(out, tag, part)
        dataset.save(d, path)
        written.append(path)

    normal = run(dataset.NORMAL, None, cfg.normal_train + cfg.normal_test)
    train, test = normal.split(cfg.normal_train)
    save(train, dataset.NORMAL, "train")
    save(test, dataset.NORMAL, "test")
    for eps in cfg.test_intensities:
        tag = dataset.scenario_tag(eps)
        trained = eps in cfg.train_intensities
        n_train = cfg.attack_train if trained else 0
        d = run(tag, _attack(cfg, eps), n_train + cfg.attack_test)
        train, test = d.split(n_train)
        if trained:
            save(train, tag, "train")
        save(test, tag, "test")
    return written


def _load(path: Path) -> Dataset:
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    return dataset.load(path)


def train(cfg: PipelineConfig, out: Path) -> list[Path]:
    out = Path(out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "grid").mkdir(parents=True, exist_ok=True)
    normal = _load(data_path(out, dataset.NORMAL, "train"))
    written = []
    for eps in cfg.train_intensities:
        tag = dataset.scenario_tag(eps)
        attacked = _load(data_path(out, tag, "train"))
        rng = np.random.default_rng(derive_seed(cfg.seed, f"trainset/{tag}"))
        training = dataset.build_training_set(normal, attacked, cfg.attack_train, rng)
        X, y = training.features(), training.labels()
        result = forest.grid_search(X, y, cfg.grid, cfg.folds, derive_seed(cfg.seed, f"grid/{tag}"))
        model = forest.fit_forest(X, y, result.best, derive_seed(cfg.seed, f"fit/{tag}"))
        grid_path = out / "grid" / f"grid-{_stem(eps)}.csv"
        grid_path.write_text(result.to_csv())
        model_path = out / "models" / f"model-{_stem(eps)}.json"
        model_path.write_text(forest.dumps(model))
        log.info("model %s: best %s (cv accuracy %.3f)", model_name(eps), result.best, result.scores[result.best])
        written += [grid_path, model_path]
    return written


def build_test_set(cfg: PipelineConfig, out: Path) -> Dataset:
    out = Path(out)
    normal = _load(data_path(out, dataset.NORMAL, "test"))
    attacked = {eps: _load(data_path(out, dataset.scenario_tag(eps), "test")) for eps in cfg.test_intensities}
    exclude = [_load(data_path(out, dataset.NORMAL, "train"))]
    exclude += [
        _load(p)
        for p in (data_path(out, dataset.scenario_tag(e), "train") for e in cfg.train_intensities)
        if p.exists()
    ]
    return dataset.build_test_set(
        normal, attacked, cfg.test_intensities, cfg.normal_test, cfg.attack_test, exclude=exclude
    )


def evaluate(cfg: PipelineConfig, out: Path) -> dict[str, evaluation.EvalReport]:
    out = Path(out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    test = build_test_set(cfg, out)
    reports = {}
    for eps in cfg.train_intensities:
        path = out / "models" / f"model-{_stem(eps)}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing model file {path}")
        model = forest.loads(path.read_text())
        name = model_name(eps)
        report = evaluation.evaluate(model, test, name)
        (out / "reports" / f"report-{_stem(eps)}.txt").write_text(report.to_text())
        reports[name] = report
    table = evaluation.compare(reports)
    (out / "reports" / "comparison.csv").write_text(table.to_csv())
    (out / "reports" / "comparison.txt").write_text(table.to_text())
    return reports


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: PipelineConfig, out: Path, timings: dict[str, float]) -> Path:
    out = Path(out)
    lines = [
        f"manifest.version = {MANIFEST_VERSION}",
        f"format.dataset = {DATASET_FORMAT_VERSION}",
        f"format.forest = {forest.FORMAT_NAME}/{forest.FORMAT_VERSION}",
        f"seed = {cfg.seed}",
    ]
    lines += [f"config.{k} = {v}" for k, v in cfg.to_mapping().items()]
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt"):
        lines.append(f"file.{path.relative_to(out).as_posix()} = {_sha256(path)}")
    # wall-clock lines are the only non-reproducible content
    lines += [f"time.{stage} = {seconds:.3f}" for stage, seconds in timings.items()]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def run_pipeline(cfg: PipelineConfig, out: Path) -> dict[str, evaluation.EvalReport]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    timings: dict[str, float] = {}
    stages: list[tuple[str, Callable]] = [("collect", collect), ("train", train), ("evaluate", evaluate)]
    result = None
    for name, stage in stages:
        t0 = time.perf_counter()
        try:
            result = stage(cfg, out)
        except Exception as exc:
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
    write_manifest(cfg, out, timings)
    return result
