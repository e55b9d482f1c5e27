"""Command-line entry point: ``cellfree-loc <verb> [flags]``.

Flags mirror ExperimentSpec fields. An INI spec given with ``--config`` is read
first and any flag given on the command line overrides it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .estimate import build_fingerprint_db
from .harness import (
    ExperimentSpec, SpecError, collect_reports, emit_plot_data, heatgrid_data, load_spec, run_experiment,
    run_sweep,
)
from .scenario import build_scenario, config_from_mapping

ENV_OUT = "CELLFREE_LOC_OUT"


def _pairs(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SpecError(key, "expected key=value")
        out[key.strip()] = value.strip()
    return out


def _seeds(text: str):
    """``0,1,2`` or ``0-9``."""
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            out += list(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return tuple(out)


def _spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI spec with [experiment], [scenario], [training], [feature] sections")
    p.add_argument("--method")
    p.add_argument("--metric")
    p.add_argument("--estimation")
    p.add_argument("--scheme")
    p.add_argument("--subset-size", type=int, dest="subset_size")
    p.add_argument("--subset-threshold", type=float, dest="subset_threshold")
    p.add_argument("--eta", type=float)
    p.add_argument("--k-neighbors", type=int, dest="k_neighbors")
    p.add_argument("--seeds", type=_seeds, help="e.g. 0,1,2 or 0-9")
    p.add_argument("--output-dir", dest="output_dir", help=f"default: ${ENV_OUT} or ./runs")
    p.add_argument("--scenario-config", dest="scenario_config", help="INI file with a [scenario] section")
    p.add_argument("--set", action="append", dest="scenario", metavar="KEY=VALUE", help="scenario field")
    p.add_argument("--train", action="append", dest="training", metavar="KEY=VALUE",
                   help="training field; positioning.*, correction.*, feature.* reach nested settings")
    p.add_argument("--feature", action="append", dest="feature", metavar="KEY=VALUE")
    p.add_argument("--random-draws", type=int, dest="random_draws")
    p.add_argument("--workers", type=int)


SPEC_KEYS = ("method", "metric", "estimation", "scheme", "subset_size", "subset_threshold", "eta", "k_neighbors",
             "seeds", "output_dir", "scenario_config", "random_draws", "workers")


def spec_from_args(args, method: str | None = None) -> ExperimentSpec:
    flags = {k: getattr(args, k) for k in SPEC_KEYS}
    for key in ("scenario", "training", "feature"):
        flags[key] = _pairs(getattr(args, key)) or None
    if method is not None:
        flags["method"] = method
    if args.config:
        spec = load_spec(args.config, **flags)
    else:
        spec = ExperimentSpec.from_dict({k: v for k, v in flags.items() if v is not None})
    if args.output_dir is None and not (args.config and _file_sets_output(args.config)):
        spec.output_dir = os.environ.get(ENV_OUT, spec.output_dir)
    return spec


def _file_sets_output(path) -> bool:
    import configparser

    parser = configparser.ConfigParser()
    parser.read(path)
    return parser.has_option("experiment", "output_dir")


def cmd_scenario(args) -> int:
    spec = spec_from_args(args)
    spec.validate()
    for seed in spec.seeds:
        scenario = build_scenario(spec.scenario_config_for(seed))
        if args.stdout:
            print(scenario.to_json())
            continue
        out = Path(spec.output_dir) / "scenario" / f"seed_{seed}"
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.json").write_text(scenario.to_json() + "\n")
        print(out / "scenario.json")
    return 0


def cmd_train(args) -> int:
    spec = spec_from_args(args, method="jpc_maddpg")
    spec.estimation = "cowknn"
    return _run(spec)


def cmd_evaluate(args) -> int:
    spec = spec_from_args(args)
    return _run(spec)


def _run(spec: ExperimentSpec) -> int:
    result = run_experiment(spec)
    print(json.dumps(result.summary()["rmse"], sort_keys=True))
    return 0


def cmd_fingerprint(args) -> int:
    spec = spec_from_args(args)
    spec.validate()
    for seed in spec.seeds:
        scenario = build_scenario(spec.scenario_config_for(seed))
        db = build_fingerprint_db(scenario, spec.eta, spec.feature_config())
        out = Path(spec.output_dir) / "fingerprint_db" / f"seed_{seed}"
        db.save(out)
        print(f"{out}: {len(db)} reference points")
    return 0


def cmd_sweep(args) -> int:
    spec = spec_from_args(args)
    name, _, values = args.vary.partition("=")
    if not values:
        raise SpecError("vary", "expected NAME=V1,V2,...")
    reports = run_sweep(spec, name.strip(), [v.strip() for v in values.split(",") if v.strip()])
    paths = emit_plot_data(reports, Path(spec.output_dir) / "plot_data")
    for p in paths:
        print(p)
    return 0


def cmd_plot_data(args) -> int:
    runs = Path(args.runs or os.environ.get(ENV_OUT, "runs"))
    reports = collect_reports(runs)
    heat = None
    if args.heatgrid and reports:
        cfg = reports[0].config["scenario"]
        heat = heatgrid_data(build_scenario(config_from_mapping(cfg)), ue=args.heatgrid_ue,
                             spacing=args.heatgrid_spacing)
    out = Path(args.out) if args.out else runs / "plot_data"
    paths = emit_plot_data(reports, out, heat)
    if args.png:
        from .plots import render_all

        paths += render_all(out)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellfree-loc", description="Cell-free massive MIMO positioning experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("scenario", help="draw scenarios and write scenario.json")
    _spec_flags(p)
    p.add_argument("--stdout", action="store_true", help="print JSON instead of writing files")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("train", help="train JPC-MADDPG and evaluate with Co-WKNN")
    _spec_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fingerprint", help="build and save fingerprint databases")
    _spec_flags(p)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("evaluate", help="run any method end to end and write reports")
    _spec_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="repeat an experiment over one varied field")
    _spec_flags(p)
    p.add_argument("--vary", required=True, metavar="NAME=V1,V2", help="scenario field, eta, subset_size or k_neighbors")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot-data", help="collect reports into tidy CSVs (and PNGs with --png)")
    p.add_argument("--runs", help=f"directory searched for report.json (default ${ENV_OUT} or ./runs)")
    p.add_argument("--out")
    p.add_argument("--heatgrid", action="store_true", help="add a similarity heat grid for the first report")
    p.add_argument("--heatgrid-ue", type=int, default=0, dest="heatgrid_ue")
    p.add_argument("--heatgrid-spacing", type=float, default=2.0, dest="heatgrid_spacing")
    p.add_argument("--png", action="store_true", help="render PNG figures next to the CSVs")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SpecError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
