import csv
from pathlib import Path

import pytest

from tankids import cli, dataset, pipeline
from tankids.config import ConfigError, PipelineConfig, derive_seed, parse_kv

SMALL = """
# quick configuration for tests
normal_train = 120
normal_test = 100
attack_train = 120
attack_test = 20
grid_n_trees = 3, 5
grid_max_depth = 4, none
grid_min_samples_split = 2
folds = 3
"""


@pytest.fixture
def small_cfg(tmp_path) -> Path:
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.train_intensities == (0.01, 0.10, 0.20)
        assert cfg.test_intensities == (0.01, 0.05, 0.10, 0.15, 0.20)
        assert (cfg.normal_train, cfg.normal_test, cfg.attack_train, cfg.attack_test) == (500, 500, 500, 100)
        assert len(cfg.grid) == 18

    def test_parse_kv(self):
        assert parse_kv("a = 1  # note\n\n b=x,y\n") == {"a": "1", "b": "x,y"}

    def test_parse_kv_error_names_line(self):
        with pytest.raises(ConfigError, match=":2:"):
            parse_kv("a=1\nbroken\n")

    def test_from_mapping(self):
        cfg = PipelineConfig.from_mapping({"pump_max_flow": "0.3", "H": "0.9", "grid_max_depth": "2,none", "seed": "4"})
        assert cfg.plant.pump_max_flow == 0.3
        assert cfg.thresholds.H == 0.9
        assert cfg.grid_max_depth == (2, None)
        assert cfg.seed == 4

    def test_roundtrip(self):
        cfg = PipelineConfig.from_mapping({"seed": "7", "features_per_split": "3", "sign_policy": "always_positive"})
        assert PipelineConfig.from_mapping(parse_kv(cfg.dumps())) == cfg

    @pytest.mark.parametrize(
        "values",
        [
            {"nope": "1"},
            {"seed": "x"},
            {"train_intensities": "0.3"},
            {"folds": "1"},
            {"L": "0.9"},
            {"pump_max_flow": "0.01"},
        ],
    )
    def test_rejected(self, values):
        with pytest.raises(ConfigError):
            PipelineConfig.from_mapping(values)

    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(0, "scenario/normal") == derive_seed(0, "scenario/normal")
        assert derive_seed(0, "scenario/normal") != derive_seed(0, "scenario/fdi-0.01")
        assert derive_seed(0, "a") != derive_seed(1, "a")
        assert 0 <= derive_seed(2**40, "x") < 2**63


class TestStages:
    def test_collect_inventory(self, tmp_path, small_cfg):
        cfg = PipelineConfig.load(small_cfg)
        written = pipeline.collect(cfg, tmp_path)
        names = sorted(p.name for p in written)
        assert len(names) == 10
        assert "fdi-0.05-test.csv" in names and "fdi-0.05-train.csv" not in names
        sizes = {p.name: len(dataset.load(p)) for p in written}
        assert sizes["normal-train.csv"] == 120 and sizes["normal-test.csv"] == 100
        assert sizes["fdi-0.10-train.csv"] == 120 and sizes["fdi-0.15-test.csv"] == 20
        train_ids = set().union(*(dataset.load(p).provenance for p in written if "train" in p.name))
        test_ids = set().union(*(dataset.load(p).provenance for p in written if "test" in p.name))
        assert not train_ids & test_ids

    def test_stages_compose_to_pipeline(self, tmp_path, small_cfg):
        cfg = PipelineConfig.load(small_cfg)
        a, b = tmp_path / "a", tmp_path / "b"
        pipeline.run_pipeline(cfg, a)
        b.mkdir()
        (b / "config.txt").write_text(cfg.dumps())
        pipeline.collect(cfg, b)
        pipeline.train(cfg, b)
        pipeline.evaluate(cfg, b)
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert set(ta) - {"manifest.txt"} == set(tb)
        for name in tb:
            assert ta[name] == tb[name], name

    def test_outputs(self, tmp_path, small_cfg):
        cfg = PipelineConfig.load(small_cfg)
        reports = pipeline.run_pipeline(cfg, tmp_path)
        assert list(reports) == ["1%", "10%", "20%"]
        assert len(list((tmp_path / "models").glob("*.json"))) == 3
        assert len(list((tmp_path / "reports").glob("report-*.txt"))) == 3
        rows = list(csv.reader((tmp_path / "grid" / "grid-10pct.csv").open()))
        assert len(rows) == 1 + len(cfg.grid)
        table = (tmp_path / "reports" / "comparison.csv").read_text().splitlines()
        assert table[0] == "Model,Accuracy,Precision,Recall,F1-Score"
        manifest = (tmp_path / "manifest.txt").read_text()
        assert "seed = 0" in manifest and "file.models/model-1pct.json = " in manifest
        assert manifest.splitlines()[-1].startswith("time.evaluate")

    def test_different_seeds_same_inventory(self, tmp_path, small_cfg):
        cfg = PipelineConfig.load(small_cfg)
        pipeline.run_pipeline(cfg, tmp_path / "s0")
        pipeline.run_pipeline(PipelineConfig.from_mapping({"seed": "1"}, cfg), tmp_path / "s1")
        t0, t1 = tree_bytes(tmp_path / "s0"), tree_bytes(tmp_path / "s1")
        assert set(t0) == set(t1)
        assert t0["reports/comparison.csv"] != t1["reports/comparison.csv"]

    def test_missing_model_named(self, tmp_path, small_cfg):
        cfg = PipelineConfig.load(small_cfg)
        pipeline.collect(cfg, tmp_path)
        with pytest.raises(FileNotFoundError, match="model-1pct.json"):
            pipeline.evaluate(cfg, tmp_path)

    def test_stage_failure_names_stage(self, tmp_path):
        cfg = PipelineConfig.from_mapping({"attack_train": "200", "normal_train": "10", "normal_test": "10"})
        with pytest.raises(pipeline.StageError, match="stage 'train'") as err:
            pipeline.run_pipeline(cfg, tmp_path)
        assert isinstance(err.value.cause, ValueError)


class TestCli:
    def test_no_command_is_usage_error(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE

    def test_unknown_flag_is_usage_error(self):
        assert cli.main(["collect", "--bogus"]) == cli.EXIT_USAGE

    def test_bad_intensity_list_is_usage_error(self):
        assert cli.main(["collect", "--intensity", "a,b"]) == cli.EXIT_USAGE

    def test_simulate_zero_steps(self, tmp_path):
        assert cli.main(["simulate", "--steps", "0", "--out", str(tmp_path)]) == cli.EXIT_OK
        assert (tmp_path / "trajectory.csv").read_text() == "step,time,level,inflow,outflow,pump,valve,safety\n"

    def test_simulate_repeatable(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["simulate", "--steps", "2000", "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()
        rows = list(csv.DictReader((tmp_path / "a" / "trajectory.csv").open()))
        assert len(rows) == 2000 and {r["safety"] for r in rows} == {"ok"}

    def test_config_error_exit_code(self, tmp_path):
        assert cli.main(["collect", "--out", str(tmp_path), "--set", "nope=1"]) == cli.EXIT_DATA

    def test_intensity_outside_test_set(self, tmp_path):
        assert cli.main(["collect", "--out", str(tmp_path), "--intensity", "0.3"]) == cli.EXIT_DATA

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["collect", "--config", str(tmp_path / "none.cfg")]) == cli.EXIT_DATA

    def test_missing_data_exit_code(self, tmp_path, capsys):
        assert cli.main(["train", "--out", str(tmp_path)]) == cli.EXIT_DATA
        assert "normal-train.csv" in capsys.readouterr().err

    def test_invariant_exit_code(self, tmp_path, monkeypatch):
        def broken(cfg, out):
            raise AssertionError("counts drifted")

        monkeypatch.setattr(pipeline, "collect", broken)
        assert cli.main(["collect", "--out", str(tmp_path)]) == cli.EXIT_INVARIANT

    def test_pipeline_with_overrides(self, tmp_path, small_cfg, capsys):
        args = ["pipeline", "--config", str(small_cfg), "--out", str(tmp_path), "--seed", "5",
                "--intensity", "0.05,0.2", "--set", "grid_n_trees=3"]
        assert cli.main(args) == cli.EXIT_OK
        assert sorted(p.name for p in (tmp_path / "models").iterdir()) == ["model-20pct.json", "model-5pct.json"]
        assert "best by F1-Score" in capsys.readouterr().out
        config = parse_kv((tmp_path / "config.txt").read_text())
        assert config["seed"] == "5" and config["grid_n_trees"] == "3"
