"""`explore` command line: run experiment grids and compare results.

    explore cmc --env {dense|maze} --size N --steps T --strategy S[,S..]
                --seeds a,b,c --beta B --out DIR
    explore av  --config FILE --out DIR
    explore report --in DIR --metric M [--step S]
"""

import argparse
import json
import sys

from .runner import ConfigError, ExperimentConfig, RunFailure, compare, load_report, run

__all__ = ["main"]


def _csv_ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part != ""]


def _csv_strs(text: str) -> list[str]:
    return [part for part in text.split(",") if part != ""]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="explore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    cmc = sub.add_parser("cmc", help="dense-world or maze exploration grid")
    cmc.add_argument("--env", choices=("dense", "maze"))
    cmc.add_argument("--size", type=int, help="state count (dense) or maze side")
    cmc.add_argument("--steps", type=int)
    cmc.add_argument("--strategy", type=_csv_strs, help="comma-separated strategies")
    cmc.add_argument("--seeds", type=_csv_ints, help="comma-separated integer seeds")
    cmc.add_argument("--beta", type=float)
    cmc.add_argument("--log-every", type=int, dest="log_every")
    cmc.add_argument("--jobs", type=int)
    cmc.add_argument("--config", help="JSON config; explicit flags override it")
    cmc.add_argument("--out", required=True)

    av = sub.add_parser("av", help="active-vision training grid")
    av.add_argument("--config", required=True, help="JSON config file")
    av.add_argument("--jobs", type=int)
    av.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="order strategies by a metric")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--metric", required=True)
    rep.add_argument("--step", type=int, help="defaults to the final logged step")
    return parser


def _cmc_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    if args.env is not None:
        raw["task"] = "dense-world" if args.env == "dense" else "maze"
    if "task" not in raw:
        raise ConfigError("either --env or a config file with a task is required")
    for key, value in (
        ("size", args.size),
        ("steps", args.steps),
        ("strategies", args.strategy),
        ("seeds", args.seeds),
        ("beta", args.beta),
        ("log_every", args.log_every),
        ("jobs", args.jobs),
    ):
        if value is not None:
            raw[key] = value
    return ExperimentConfig.from_dict(raw)


def _av_config(args) -> ExperimentConfig:
    with open(args.config) as fh:
        raw = json.load(fh)
    raw.setdefault("task", "active-vision")
    if args.jobs is not None:
        raw["jobs"] = args.jobs
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command in ("cmc", "av"):
            config = _cmc_config(args) if args.command == "cmc" else _av_config(args)
            report = run(config, args.out)
            final = report.final_step()
            print(f"completed {len(config.strategies) * len(config.seeds)} cells -> {args.out}")
            metric = "missing_info" if config.task != "active-vision" else "recon_mse"
            for strategy, mean, sem in compare(report, metric, final):
                sem_text = "n/a" if sem is None else f"{sem:.6g}"
                print(f"  {metric}@{final}: {strategy} mean={mean:.6g} sem={sem_text}")
            return 0
        report = load_report(args.in_dir)
        step = args.step if args.step is not None else max(
            r[1] for r in report.rows if r[2] == args.metric
        )
        for strategy, mean, sem in compare(report, args.metric, step):
            sem_text = "" if sem is None else repr(sem)
            print(f"{strategy},{mean!r},{sem_text}")
        return 0
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
