"""Command-line entry point: ``ldcq <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config, parse_value
from .errors import ConfigError, DependencyError, EmptyOutputError, ShapeError, TrainingDivergenceError
from .pipeline import Pipeline, horizon_sweep, read_metrics, run_pipeline

STAGE_VERBS = ("gen-data", "train-vae", "train-prior", "train-q", "train-wm")


def _global(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="top-level seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--env", help="environment name (rw1d, trimodal, gridmaze-tee, gridmaze-u)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. vae.epochs=5 (repeatable)")
    p.add_argument("--paper-scale", action="store_true",
                   help="use the large-scale table hyperparameters instead of desk presets")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldcq", description="Latent diffusion skill learning on toy tasks")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in STAGE_VERBS:
        p = sub.add_parser(verb, help=f"run the {verb} stage")
        _global(p)
        p.add_argument("--force", action="store_true", help="rerun even if the artifact exists")
        if verb == "train-q":
            p.add_argument("--method", choices=("ldcq", "bcq"))
    p = sub.add_parser("run", help="all stages needed for the eval mode(s), then eval")
    _global(p)
    p.add_argument("--modes", help="comma-separated eval modes")
    p = sub.add_parser("eval", help="evaluate a trained run")
    _global(p)
    p.add_argument("--mode", choices=("ldcq", "bcq", "ldgc", "ldcp", "behavior"))
    p.add_argument("--depth", type=int)
    p.add_argument("--candidates", type=int, help="candidates per decision (or per planning node)")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("analyze", help="latent PCA, silhouette and prior coverage")
    _global(p)
    p.add_argument("--all-starts", action="store_true", help="use every snippet, not only episode starts")
    p = sub.add_parser("sweep", help="full pipeline per horizon")
    _global(p)
    p.add_argument("--H", required=True, help="comma-separated horizons")
    p.add_argument("--methods", default="ldcq")
    p = sub.add_parser("plot", help="export plot data (CSV, SVG)")
    _global(p)
    p.add_argument("--kind", required=True)
    p.add_argument("--no-svg", action="store_true")
    return parser


def resolve_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    if args.env:
        overrides["env"] = args.env
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    path = args.config
    if path is None and args.out is not None and (args.out / "config.txt").exists():
        path = args.out / "config.txt"
    return load_config(path, overrides, args.paper_scale)


def _eval_overrides(args) -> dict:
    out = {}
    if getattr(args, "episodes", None):
        out["episodes"] = args.episodes
    if getattr(args, "candidates", None):
        out["n_candidates"] = args.candidates
        out["plan_n"] = args.candidates
    if getattr(args, "depth", None):
        out["depth"] = args.depth
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.verb in STAGE_VERBS:
            p = Pipeline(cfg)
            ran = p.run_stage(args.verb, force=args.force, method=getattr(args, "method", None))
            print(f"{args.verb}: {'done' if ran else 'up to date'} ({p.out})")
        elif args.verb == "run":
            modes = args.modes.split(",") if args.modes else None
            res = run_pipeline(cfg, modes=modes)
            for m, rep in res.reports.items():
                print(json.dumps(rep.summary(), sort_keys=True))
        elif args.verb == "eval":
            if args.mode:
                cfg = cfg.updated({"eval.mode": args.mode})
            p = Pipeline(cfg)
            rep = p.evaluate(args.mode, **_eval_overrides(args))
            print(json.dumps(rep.summary(), sort_keys=True))
        elif args.verb == "analyze":
            res = Pipeline(cfg).analyze(starts_only=not args.all_starts)
            print(json.dumps({k: res[k] for k in ("points", "silhouette", "coverage")}, sort_keys=True))
        elif args.verb == "sweep":
            rows = horizon_sweep(cfg, [int(h) for h in args.H.split(",")],
                                 methods=tuple(args.methods.split(",")))
            for r in rows:
                print(json.dumps(r, sort_keys=True))
        elif args.verb == "plot":
            files = _plot(cfg, args.kind, not args.no_svg)
            for f in files:
                print(f)
        return 0
    except (ConfigError, DependencyError, EmptyOutputError, ShapeError, TrainingDivergenceError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def _plot(cfg, kind: str, svg: bool):
    from .plots import KINDS, export_plots, read_csv
    if kind not in KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; known: {KINDS}")
    out = Path(cfg.out)
    if kind == "pca":
        res = Pipeline(cfg).analyze()
        metrics = {"projections": res["projections"], "labels": res["labels"]}
    elif kind == "sweep":
        header, rows = read_csv(out / "sweep.csv")
        metrics = [dict(zip(header, r)) for r in rows]
    else:
        series: dict[str, list[float]] = {}
        for row in read_metrics(out / "metrics.csv"):
            if row["stage"].startswith("train"):
                series.setdefault(f"{row['stage']}:{row['metric']}", []).append(float(row["value"]))
        metrics = series
    return export_plots(metrics, kind, out / "plots", svg=svg)


if __name__ == "__main__":
    sys.exit(main())
