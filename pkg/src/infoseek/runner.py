"""Reproducible experiment orchestration.

An experiment is a grid of (strategy, seed) cells over one task. Every
cell gets its own RNG stream derived from the cell seed with splitmix64,
worlds and corpora are derived from the seed alone so strategies are
compared on identical environments, and all outputs (per-run CSV,
aggregate CSV, PGM artifacts, config echo) are byte-deterministic.
"""

import csv
import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import av_agent, cmc_agent, cmc_env
from .av_env import make_glyph_corpus
from .imageio import write_pgm

__all__ = [
    "ConfigError",
    "RunFailure",
    "ExperimentConfig",
    "AggregateReport",
    "splitmix64",
    "derive_seed",
    "run",
    "compare",
    "load_report",
]

_MASK = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid experiment configuration; raised before any cell runs."""


class RunFailure(RuntimeError):
    """At least one cell failed; completed outputs were preserved."""


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(seed: int, tag: str) -> int:
    """Expand one seed into an independent per-purpose stream seed."""
    return splitmix64(splitmix64(seed & _MASK) ^ zlib.crc32(tag.encode()))


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

_CMC_STRATEGIES = set(cmc_agent.STRATEGIES)
_AV_STRATEGIES = set(av_agent.AV_STRATEGIES)

_COMMON_FIELDS = {
    "task": (str, None),
    "strategies": (list, None),
    "seeds": (list, None),
    "jobs": (int, 1),
}

# defaults follow the documented experiment tables
_TASK_FIELDS = {
    # flat worlds are uncontrollable, so the future-uncertainty bonus only
    # adds noise there; mazes keep it (and sampled weights) for steering
    "dense-world": {
        "size": (int, 10),
        "steps": (int, 2000),
        "beta": (float, 1.0),
        "learning_rate": (float, 2e-3),
        "lr_end": (float, 2e-4),
        "elbo_mode": (str, "analytic"),
        "efu": (bool, False),
        "sample_weights": (bool, False),
        "exact_update": (bool, True),
        "train_scope": (str, "full"),
        "inner_steps": (int, 2),
        "hidden_units": (int, 16),
        "log_every": (int, 10),
    },
    "maze": {
        "size": (int, 6),
        "steps": (int, 3000),
        "beta": (float, 1.0),
        "learning_rate": (float, 2e-3),
        "lr_end": (float, 2e-4),
        "elbo_mode": (str, "analytic"),
        "efu": (bool, True),
        "sample_weights": (bool, False),
        "exact_update": (bool, True),
        "train_scope": (str, "full"),
        "inner_steps": (int, 2),
        "hidden_units": (int, 16),
        "log_every": (int, 10),
    },
    "active-vision": {
        "image_size": (int, 28),
        "patch_dim": (int, 8),
        "n_fov": (int, 1),
        "fov_scale": (int, 2),
        "n_fixations": (int, 3),
        "z_dim": (int, 32),
        "s_dim": (int, 64),
        "beta": (float, 0.1),
        "sigma_action": (float, 0.15),
        "mc_samples": (int, 5),
        "perception_lr": (float, 1e-3),
        "action_lr": (float, 1e-3),
        "decision_lr": (float, 1e-3),
        "batch_size": (int, 64),
        "pretrain_epochs": (int, 0),
        "train_epochs": (int, 5),
        "hidden_units": (int, 256),
        "n_per_class": (int, 100),
        "test_n_per_class": (int, 50),
        "noise_std": (float, 0.05),
        "translated": (bool, False),
    },
}


@dataclass
class ExperimentConfig:
    task: str
    strategies: list
    seeds: list
    params: dict
    jobs: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        task = raw.get("task")
        if task not in _TASK_FIELDS:
            raise ConfigError(f"task must be one of {sorted(_TASK_FIELDS)}, got {task!r}")
        allowed = set(_COMMON_FIELDS) | set(_TASK_FIELDS[task])
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys for task {task}: {sorted(unknown)}")

        def pull(name, spec):
            typ, default = spec
            if name in raw:
                value = raw[name]
            elif default is not None:
                value = default
            else:
                raise ConfigError(f"missing required config key: {name}")
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if typ is int and isinstance(value, bool):
                raise ConfigError(f"config key {name} must be {typ.__name__}")
            if not isinstance(value, typ):
                raise ConfigError(f"config key {name} must be {typ.__name__}")
            return value

        strategies = pull("strategies", _COMMON_FIELDS["strategies"])
        seeds = pull("seeds", _COMMON_FIELDS["seeds"])
        jobs = pull("jobs", _COMMON_FIELDS["jobs"])
        if not strategies:
            raise ConfigError("strategies must be nonempty")
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds must be a nonempty list of integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct (duplicates would overwrite outputs)")
        valid = _CMC_STRATEGIES if task != "active-vision" else _AV_STRATEGIES
        bad = [s for s in strategies if s not in valid]
        if bad:
            raise ConfigError(f"unknown strategy names for task {task}: {bad}")
        if jobs < 1:
            raise ConfigError("jobs must be at least 1")

        params = {name: pull(name, spec) for name, spec in _TASK_FIELDS[task].items()}
        for name in ("size", "steps", "image_size", "n_fixations", "train_epochs", "n_per_class"):
            if name in params and params[name] < 1:
                raise ConfigError(f"config key {name} must be positive")
        return cls(task=task, strategies=list(strategies), seeds=list(seeds), params=params, jobs=jobs)

    def to_dict(self) -> dict:
        return {"task": self.task, "strategies": self.strategies, "seeds": self.seeds, **self.params}


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


def _make_world(task: str, params: dict, seed: int):
    rng = np.random.default_rng(derive_seed(seed, "world"))
    if task == "dense-world":
        return cmc_env.make_dense_world(params["size"], 4, rng)
    spec = cmc_env.MazeSpec.random(params["size"], rng)
    return cmc_env.make_maze(spec, rng)


def _run_cmc_cell(task: str, params: dict, strategy: str, seed: int, out_dir: str) -> dict:
    kernel = _make_world(task, params, seed)
    config = cmc_agent.CmcAgentConfig(
        strategy=strategy,
        steps=params["steps"],
        beta=params["beta"],
        elbo_mode=params["elbo_mode"],
        learning_rate=params["learning_rate"],
        lr_end=params["lr_end"],
        efu=params["efu"],
        sample_weights=params["sample_weights"],
        exact_update=params["exact_update"],
        train_scope=params["train_scope"],
        inner_steps=params["inner_steps"],
        hidden_units=params["hidden_units"],
        log_every=params["log_every"],
        seed=derive_seed(seed, f"agent-{strategy}"),
    )
    log = cmc_agent.run_episode(config, kernel)
    run_csv = os.path.join(out_dir, "runs", f"{strategy}_seed{seed}.csv")
    with open(run_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cmc_agent.RunLog.HEADER)
        for step_i, im, cov, loss in log.rows:
            writer.writerow([step_i, strategy, seed, repr(im), repr(cov), repr(loss)])
    files = [run_csv]

    world_json = os.path.join(out_dir, "runs", f"world_seed{seed}.json")
    if not os.path.exists(world_json):
        cmc_env.save_kernel_json(world_json, kernel)
    files.append(world_json)
    learned_json = os.path.join(out_dir, "runs", f"learned_{strategy}_seed{seed}.json")
    cmc_env.save_kernel_json(learned_json, log.final_kernel)
    files.append(learned_json)

    if task == "maze":
        side = params["size"]
        grid = cmc_env.visitation_map(log.trajectory, side)
        pgm = os.path.join(out_dir, "maps", f"visit_{strategy}_seed{seed}.pgm")
        cmc_env.save_visitation_pgm(pgm, grid)
        files.append(pgm)
    return {"strategy": strategy, "seed": seed, "files": sorted(files)}


def _run_av_cell(params: dict, strategy: str, seed: int, out_dir: str) -> dict:
    corpus_rng = np.random.default_rng(derive_seed(seed, "corpus-train"))
    corpus = make_glyph_corpus(
        params["n_per_class"],
        params["image_size"],
        params["translated"],
        params["noise_std"],
        corpus_rng,
        split="train",
    )
    test_rng = np.random.default_rng(derive_seed(seed, "corpus-test"))
    test_corpus = make_glyph_corpus(
        params["test_n_per_class"],
        params["image_size"],
        params["translated"],
        params["noise_std"],
        test_rng,
        split="test",
    )
    config = av_agent.AvConfig(
        image_size=params["image_size"],
        patch_dim=params["patch_dim"],
        n_fov=params["n_fov"],
        fov_scale=params["fov_scale"],
        n_fixations=params["n_fixations"],
        z_dim=params["z_dim"],
        s_dim=params["s_dim"],
        beta=params["beta"],
        sigma_action=params["sigma_action"],
        mc_samples=params["mc_samples"],
        perception_lr=params["perception_lr"],
        action_lr=params["action_lr"],
        decision_lr=params["decision_lr"],
        batch_size=params["batch_size"],
        pretrain_epochs=params["pretrain_epochs"],
        train_epochs=params["train_epochs"],
        hidden_units=params["hidden_units"],
        strategy=strategy,
        seed=derive_seed(seed, f"agent-{strategy}"),
    )
    result = av_agent.run_av_training(config, corpus)
    run_csv = os.path.join(out_dir, "runs", f"{strategy}_seed{seed}.csv")
    log = result.log
    log.seed = seed  # report the grid seed, not the derived stream seed
    log.to_csv(run_csv)
    files = [run_csv]

    eval_rng = np.random.default_rng(derive_seed(seed, f"eval-{strategy}"))
    test_accuracy = av_agent.evaluate_accuracy(result, test_corpus, config, eval_rng)

    # stitched composite from the first test image's inferred state
    trial_rng = np.random.default_rng(derive_seed(seed, f"stitch-{strategy}"))
    feats, _ = av_agent.collect_features(result, test_corpus, config, trial_rng, strategy="random")
    locs = av_agent.central_grid(params["image_size"], params["patch_dim"])
    composite = av_agent.generate_stitched(
        result.vae,
        feats[0],
        locs,
        params["patch_dim"],
        (params["image_size"], params["image_size"]),
        trial_rng,
    )
    pgm = os.path.join(out_dir, "composites", f"composite_{strategy}_seed{seed}.pgm")
    write_pgm(pgm, composite)
    files.append(pgm)

    ckpt = os.path.join(out_dir, "runs", f"vae_{strategy}_seed{seed}.ckpt")
    result.vae.save(ckpt)
    files.append(ckpt)
    return {
        "strategy": strategy,
        "seed": seed,
        "files": sorted(files),
        "test_accuracy": test_accuracy,
    }


def _run_cell(task: str, params: dict, strategy: str, seed: int, out_dir: str) -> dict:
    if task == "active-vision":
        return _run_av_cell(params, strategy, seed, out_dir)
    return _run_cmc_cell(task, params, strategy, seed, out_dir)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

_CMC_METRICS = ("missing_info", "coverage", "loss")
_AV_METRICS = ("elbo", "recon_mse", "accuracy")


@dataclass
class AggregateReport:
    """Mean and SEM curves per (strategy, step, metric) across seeds."""

    rows: list = field(default_factory=list)  # (strategy, step, metric, mean, sem|None, n)

    HEADER = ("strategy", "step", "metric", "mean", "sem", "n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for strategy, step_i, metric, mean, sem, n in self.rows:
                sem_str = "" if sem is None else repr(sem)
                writer.writerow([strategy, step_i, metric, repr(mean), sem_str, n])

    def steps(self) -> list[int]:
        return sorted({r[1] for r in self.rows})

    def final_step(self) -> int:
        return max(r[1] for r in self.rows)


def _aggregate(run_dir: str, task: str) -> AggregateReport:
    metrics = _AV_METRICS if task == "active-vision" else _CMC_METRICS
    step_key = "epoch" if task == "active-vision" else "step"
    series: dict = {}
    for name in sorted(os.listdir(run_dir)):
        if not name.endswith(".csv"):
            continue
        with open(os.path.join(run_dir, name), newline="") as fh:
            for row in csv.DictReader(fh):
                for metric in metrics:
                    text = row.get(metric, "")
                    if text == "":
                        continue
                    key = (row["strategy"], int(row[step_key]), metric)
                    series.setdefault(key, []).append(float(text))
    report = AggregateReport()
    for (strategy, step_i, metric), values in sorted(series.items()):
        arr = np.asarray(values)
        mean = float(arr.mean())
        sem = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size >= 2 else None
        report.rows.append((strategy, step_i, metric, mean, sem, arr.size))
    return report


def load_report(out_dir) -> AggregateReport:
    report = AggregateReport()
    with open(os.path.join(out_dir, "aggregate.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            sem = None if row["sem"] == "" else float(row["sem"])
            report.rows.append(
                (row["strategy"], int(row["step"]), row["metric"], float(row["mean"]), sem, int(row["n"]))
            )
    return report


def compare(report: AggregateReport, metric: str, step: int) -> list[tuple]:
    """Strategies ordered by mean metric at a step: (strategy, mean, sem)."""
    rows = [r for r in report.rows if r[2] == metric and r[1] == step]
    if not rows:
        known_steps = sorted({r[1] for r in report.rows if r[2] == metric})
        if not known_steps:
            raise ValueError(f"metric {metric!r} not present in report")
        raise ValueError(f"step {step} not logged for metric {metric!r}; steps: {known_steps}")
    return sorted(((r[0], r[3], r[4]) for r in rows), key=lambda item: item[1])


# ---------------------------------------------------------------------------
# top-level run
# ---------------------------------------------------------------------------


def run(config: ExperimentConfig, out_dir) -> AggregateReport:
    """Execute every (strategy, seed) cell and write all artifacts.

    Raises :class:`RunFailure` after preserving partial outputs and the
    manifest when any cell fails.
    """
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "runs"), exist_ok=True)
    if config.task == "maze":
        os.makedirs(os.path.join(out_dir, "maps"), exist_ok=True)
    if config.task == "active-vision":
        os.makedirs(os.path.join(out_dir, "composites"), exist_ok=True)

    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")

    cells = [(strategy, seed) for strategy in config.strategies for seed in config.seeds]
    completed, failed = [], []
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = {
                pool.submit(_run_cell, config.task, config.params, strategy, seed, str(out_dir)): (
                    strategy,
                    seed,
                )
                for strategy, seed in cells
            }
            for future, (strategy, seed) in futures.items():
                try:
                    completed.append(future.result())
                except Exception as exc:  # noqa: BLE001 - preserved in manifest
                    failed.append({"strategy": strategy, "seed": seed, "error": str(exc)})
    else:
        for strategy, seed in cells:
            try:
                completed.append(_run_cell(config.task, config.params, strategy, seed, str(out_dir)))
            except Exception as exc:  # noqa: BLE001
                failed.append({"strategy": strategy, "seed": seed, "error": str(exc)})

    completed.sort(key=lambda c: (c["strategy"], c["seed"]))
    for cell in completed:  # manifest paths are relative so reruns compare bytewise
        cell["files"] = sorted(os.path.relpath(f, out_dir) for f in cell["files"])
    manifest = {"completed": completed, "failed": sorted(failed, key=lambda c: (c["strategy"], c["seed"]))}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if failed:
        raise RunFailure(f"{len(failed)} of {len(cells)} cells failed; see manifest.json")

    report = _aggregate(os.path.join(out_dir, "runs"), config.task)
    report.to_csv(os.path.join(out_dir, "aggregate.csv"))
    return report
