"""Experiment orchestration: config validation, determinism, aggregation
cross-checks, and the `explore` command line."""

import csv
import hashlib
import json
import os

import numpy as np
import pytest

from infoseek import runner
from infoseek.cli import main
from infoseek.runner import (
    AggregateReport,
    ConfigError,
    ExperimentConfig,
    RunFailure,
    compare,
    derive_seed,
    load_report,
    run,
    splitmix64,
)

DENSE_RAW = {
    "task": "dense-world",
    "strategies": ["bas", "random"],
    "seeds": [0, 1],
    "size": 5,
    "steps": 60,
    "log_every": 20,
}

AV_RAW = {
    "task": "active-vision",
    "strategies": ["random"],
    "seeds": [0],
    "image_size": 28,
    "patch_dim": 6,
    "n_fixations": 2,
    "z_dim": 4,
    "s_dim": 6,
    "hidden_units": 32,
    "batch_size": 10,
    "train_epochs": 1,
    "n_per_class": 2,
    "test_n_per_class": 1,
    "noise_std": 0.0,
    "mc_samples": 2,
}


def tree_digest(root) -> dict:
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            out[rel] = hashlib.sha256(open(path, "rb").read()).hexdigest()
    return out


class TestSeeding:
    def test_splitmix_against_independent_reimplementation(self):
        mask = (1 << 64) - 1

        def oracle(x):
            z = (x + 0x9E3779B97F4A7C15) & mask
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
            return (z ^ (z >> 31)) & mask

        for x in (0, 1, 2, 123456789, 2**63, 2**64 - 1):
            assert splitmix64(x) == oracle(x)
        outputs = {splitmix64(x) for x in range(1000)}
        assert len(outputs) == 1000  # no collisions on consecutive inputs

    def test_derive_seed_distinct_and_stable(self):
        a = derive_seed(7, "world")
        assert a == derive_seed(7, "world")
        assert a != derive_seed(7, "agent-bas")
        assert a != derive_seed(8, "world")


class TestConfigValidation:
    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict(DENSE_RAW)
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert cfg.to_dict() == again.to_dict()

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig.from_dict({**DENSE_RAW, "stepz": 10})

    def test_unknown_strategy_rejected_before_running(self):
        with pytest.raises(ConfigError, match="unknown strategy"):
            ExperimentConfig.from_dict({**DENSE_RAW, "strategies": ["bas", "greedy"]})
        with pytest.raises(ConfigError, match="unknown strategy"):
            ExperimentConfig.from_dict({**AV_RAW, "strategies": ["boltzmann"]})

    def test_missing_and_bad_types(self):
        with pytest.raises(ConfigError, match="task"):
            ExperimentConfig.from_dict({"strategies": ["bas"], "seeds": [1]})
        with pytest.raises(ConfigError, match="seeds"):
            ExperimentConfig.from_dict({**DENSE_RAW, "seeds": []})
        with pytest.raises(ConfigError, match="seeds"):
            ExperimentConfig.from_dict({**DENSE_RAW, "seeds": [0.5]})
        with pytest.raises(ConfigError, match="must be int"):
            ExperimentConfig.from_dict({**DENSE_RAW, "steps": "many"})
        with pytest.raises(ConfigError, match="positive"):
            ExperimentConfig.from_dict({**DENSE_RAW, "steps": 0})


class TestRun:
    def test_outputs_and_aggregate_cross_check(self, tmp_path):
        out = tmp_path / "dense"
        report = run(ExperimentConfig.from_dict(DENSE_RAW), out)
        assert (out / "config.json").exists()
        assert (out / "manifest.json").exists()
        assert (out / "aggregate.csv").exists()
        run_files = sorted(os.listdir(out / "runs"))
        assert "bas_seed0.csv" in run_files and "random_seed1.csv" in run_files
        assert "world_seed0.json" in run_files and "learned_bas_seed1.json" in run_files

        # independent reader: recompute aggregate means from per-run CSVs
        values = {}
        for name in run_files:
            if not name.endswith(".csv"):
                continue
            with open(out / "runs" / name, newline="") as fh:
                for row in csv.DictReader(fh):
                    for metric in ("missing_info", "coverage", "loss"):
                        key = (row["strategy"], int(row["step"]), metric)
                        values.setdefault(key, []).append(float(row[metric]))
        for strategy, step, metric, mean, sem, n in report.rows:
            got = values[(strategy, step, metric)]
            assert len(got) == n
            assert mean == pytest.approx(np.mean(got), rel=1e-12)

    def test_byte_identical_reruns(self, tmp_path):
        run(ExperimentConfig.from_dict(DENSE_RAW), tmp_path / "a")
        run(ExperimentConfig.from_dict(DENSE_RAW), tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_config_echo_reproduces_outputs(self, tmp_path):
        run(ExperimentConfig.from_dict(DENSE_RAW), tmp_path / "a")
        echoed = json.loads((tmp_path / "a" / "config.json").read_text())
        run(ExperimentConfig.from_dict(echoed), tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_duplicate_seeds_rejected(self):
        with pytest.raises(ConfigError, match="distinct"):
            ExperimentConfig.from_dict({**DENSE_RAW, "seeds": [3, 3]})

    def test_duplicated_identical_runs_aggregate_to_zero_sem(self, tmp_path):
        raw = {**DENSE_RAW, "strategies": ["random"], "seeds": [3]}
        out = tmp_path / "dup"
        run(ExperimentConfig.from_dict(raw), out)
        src = out / "runs" / "random_seed3.csv"
        clone = (out / "runs" / "random_seed4.csv")
        clone.write_text(src.read_text().replace(",3,", ",4,"))
        report = runner._aggregate(str(out / "runs"), "dense-world")
        for _, _, _, _, sem, n in report.rows:
            assert n == 2 and sem == 0.0

    def test_single_seed_sem_absent(self, tmp_path):
        raw = {**DENSE_RAW, "strategies": ["random"], "seeds": [5]}
        report = run(ExperimentConfig.from_dict(raw), tmp_path / "single")
        assert all(sem is None for _, _, _, _, sem, _ in report.rows)
        loaded = load_report(tmp_path / "single")
        assert all(sem is None for _, _, _, _, sem, _ in loaded.rows)

    def test_maze_outputs_heatmaps(self, tmp_path):
        raw = {
            "task": "maze",
            "strategies": ["random"],
            "seeds": [0],
            "size": 3,
            "steps": 40,
            "log_every": 40,
        }
        run(ExperimentConfig.from_dict(raw), tmp_path / "maze")
        assert (tmp_path / "maze" / "maps" / "visit_random_seed0.pgm").exists()

    def test_av_cell_outputs(self, tmp_path):
        report = run(ExperimentConfig.from_dict(AV_RAW), tmp_path / "av")
        assert (tmp_path / "av" / "runs" / "random_seed0.csv").exists()
        assert (tmp_path / "av" / "composites" / "composite_random_seed0.pgm").exists()
        assert (tmp_path / "av" / "runs" / "vae_random_seed0.ckpt").exists()
        manifest = json.loads((tmp_path / "av" / "manifest.json").read_text())
        assert "test_accuracy" in manifest["completed"][0]
        metrics = {r[2] for r in report.rows}
        assert {"elbo", "recon_mse"} <= metrics

    def test_failure_preserves_manifest(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        original = runner._run_cmc_cell

        def flaky(task, params, strategy, seed, out_dir):
            calls["n"] += 1
            if strategy == "random":
                raise RuntimeError("boom")
            return original(task, params, strategy, seed, out_dir)

        monkeypatch.setattr(runner, "_run_cmc_cell", flaky)
        with pytest.raises(RunFailure):
            run(ExperimentConfig.from_dict(DENSE_RAW), tmp_path / "fail")
        manifest = json.loads((tmp_path / "fail" / "manifest.json").read_text())
        assert len(manifest["failed"]) == 2
        assert len(manifest["completed"]) == 2
        assert manifest["failed"][0]["error"] == "boom"
        assert (tmp_path / "fail" / "runs" / "bas_seed0.csv").exists()

    def test_parallel_jobs_match_serial(self, tmp_path):
        raw = {**DENSE_RAW, "steps": 30, "log_every": 30}
        run(ExperimentConfig.from_dict(raw), tmp_path / "serial")
        run(ExperimentConfig.from_dict({**raw, "jobs": 2}), tmp_path / "parallel")
        serial = tree_digest(tmp_path / "serial")
        parallel = tree_digest(tmp_path / "parallel")
        del serial["config.json"], parallel["config.json"]  # jobs is not echoed
        assert serial == parallel


class TestCompare:
    def make_report(self):
        report = AggregateReport()
        report.rows = [
            ("bas", 10, "missing_info", 1.5, 0.1, 3),
            ("random", 10, "missing_info", 2.5, None, 1),
            ("boltzmann", 10, "missing_info", 2.0, 0.2, 3),
        ]
        return report

    def test_ordering(self):
        ordered = compare(self.make_report(), "missing_info", 10)
        assert [row[0] for row in ordered] == ["bas", "boltzmann", "random"]

    def test_missing_step_and_metric(self):
        with pytest.raises(ValueError, match="step"):
            compare(self.make_report(), "missing_info", 99)
        with pytest.raises(ValueError, match="metric"):
            compare(self.make_report(), "accuracy", 10)


class TestCli:
    def test_cmc_run_and_report(self, tmp_path, capsys):
        out = tmp_path / "cli"
        code = main(
            [
                "cmc", "--env", "dense", "--size", "5", "--steps", "60",
                "--strategy", "bas,random", "--seeds", "0,1",
                "--log-every", "20", "--out", str(out),
            ]
        )
        assert code == 0
        assert (out / "aggregate.csv").exists()
        capsys.readouterr()
        assert main(["report", "--in", str(out), "--metric", "coverage"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2
        assert {line.split(",")[0] for line in lines} == {"bas", "random"}

    def test_cli_byte_determinism(self, tmp_path):
        args = [
            "cmc", "--env", "dense", "--size", "5", "--steps", "40",
            "--strategy", "random", "--seeds", "0", "--log-every", "20",
        ]
        assert main(args + ["--out", str(tmp_path / "x")]) == 0
        assert main(args + ["--out", str(tmp_path / "y")]) == 0
        assert tree_digest(tmp_path / "x") == tree_digest(tmp_path / "y")

    def test_cli_config_file_with_flag_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(DENSE_RAW))
        out = tmp_path / "from_file"
        code = main(["cmc", "--config", str(cfg_path), "--seeds", "2",
                     "--steps", "30", "--out", str(out)])
        assert code == 0
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["seeds"] == [2] and echoed["steps"] == 30

    def test_av_cli(self, tmp_path):
        cfg_path = tmp_path / "av.json"
        cfg_path.write_text(json.dumps(AV_RAW))
        out = tmp_path / "av_out"
        assert main(["av", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "aggregate.csv").exists()

    def test_bad_strategy_exits_2(self, tmp_path, capsys):
        code = main(
            ["cmc", "--env", "dense", "--size", "5", "--steps", "10",
             "--strategy", "zigzag", "--seeds", "0", "--out", str(tmp_path / "bad")]
        )
        assert code == 2
        assert "unknown strategy" in capsys.readouterr().err

    def test_report_missing_metric_exits_2(self, tmp_path, capsys):
        out = tmp_path / "r"
        main(["cmc", "--env", "dense", "--size", "5", "--steps", "20",
              "--strategy", "random", "--seeds", "0", "--log-every", "20",
              "--out", str(out)])
        assert main(["report", "--in", str(out), "--metric", "nope"]) == 2
