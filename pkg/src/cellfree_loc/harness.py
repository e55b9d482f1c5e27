"""Seeded end-to-end experiments with persisted, diffable artifacts.

Layout of one run::

    <output_dir>/<method>/seed_<s>/manifest.json, report.json, report.csv, scenario.json, ...
    <output_dir>/<method>/summary.json, summary.csv

Nothing written here carries timestamps or absolute paths, so a re-run of the
same spec and seeds reproduces every file byte for byte.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .estimate import (
    EvalReport, build_fingerprint_db, fingerprint_scores, knn_from_scores, reference_grid,
)
from .features import FeatureConfig, hypothesis_feature_arrays, measured_feature_arrays
from .marl.jpc import TrainConfig, random_action_rmse, train_jpc
from .scenario import ScenarioConfig, build_scenario, config_from_mapping, load_config
from .similarity import SUBSET_SCHEMES, grid_similarity, select_evaluation_subset, write_heatgrid

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("jpc_maddpg", "fingerprint_basic", "fingerprint_knn", "fingerprint_wknn", "random_baseline")
ESTIMATIONS = ("basic", "knn", "wknn", "cowknn")
METRICS = ("rss", "aoa", "joint")
METHOD_ESTIMATION = {
    "jpc_maddpg": "cowknn",
    "fingerprint_basic": "basic",
    "fingerprint_knn": "knn",
    "fingerprint_wknn": "wknn",
    "random_baseline": None,
}
TAG_RANDOM = 61
PLOT_FILES = ("cdf.csv", "convergence.csv", "rmse_vs_M.csv", "rmse_vs_N.csv", "rmse_vs_L.csv", "heatgrid.csv")


class SpecError(ValueError):
    """Invalid experiment spec; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentSpec:
    method: str = "fingerprint_wknn"
    metric: str = "joint"
    estimation: str | None = None  # None: implied by the method
    scheme: str = "highest_similarity"
    subset_size: int | None = None  # L_k; None uses every AP
    subset_threshold: float | None = None  # dB, for the threshold scheme
    eta: float = 2.5
    k_neighbors: int = 4
    seeds: tuple = (0,)
    output_dir: str = "runs"
    scenario_config: str | None = None  # INI file with a [scenario] section
    scenario: dict = field(default_factory=dict)  # field overrides on top of the file
    training: dict = field(default_factory=dict)  # TrainConfig overrides, dotted keys for nested ones
    feature: dict = field(default_factory=dict)
    random_draws: int = 20
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.estimation is None:
            self.estimation = METHOD_ESTIMATION.get(self.method)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise SpecError("method", f"must be one of {METHODS}, got {self.method!r}")
        if self.metric not in METRICS:
            raise SpecError("metric", f"must be one of {METRICS}, got {self.metric!r}")
        expected = METHOD_ESTIMATION[self.method]
        if self.estimation is not None and self.estimation not in ESTIMATIONS:
            raise SpecError("estimation", f"must be one of {ESTIMATIONS}, got {self.estimation!r}")
        if self.estimation != expected:
            raise SpecError("estimation", f"{self.method} requires {expected!r}, got {self.estimation!r}")
        if self.scheme not in SUBSET_SCHEMES:
            raise SpecError("scheme", f"must be one of {SUBSET_SCHEMES}, got {self.scheme!r}")
        if self.scheme == "threshold" and self.subset_threshold is None and self.subset_size is not None:
            raise SpecError("subset_threshold", "threshold scheme needs subset_threshold")
        if self.subset_size is not None and self.subset_size < 1:
            raise SpecError("subset_size", "must be >= 1")
        if not self.seeds:
            raise SpecError("seeds", "must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise SpecError("seeds", "must be distinct")
        if not self.eta > 0:
            raise SpecError("eta", "must be > 0")
        if self.k_neighbors < 1:
            raise SpecError("k_neighbors", "must be >= 1")
        if self.random_draws < 1:
            raise SpecError("random_draws", "must be >= 1")
        if self.workers < 1:
            raise SpecError("workers", "must be >= 1")
        try:
            config = self.scenario_config_for(self.seeds[0])
            config.validate()
        except (ValueError, TypeError, OSError) as exc:
            raise SpecError("scenario", str(exc)) from exc
        if self.subset_size is not None and self.subset_size > config.ap_count:
            raise SpecError("subset_size", f"exceeds AP count {config.ap_count}")
        if self.method.startswith("fingerprint") and self.k_neighbors > len(reference_grid(config.area_side, self.eta)):
            raise SpecError("k_neighbors", "exceeds the number of reference points")
        try:
            self.train_config(self.seeds[0])
            self.feature_config().validate()
        except (ValueError, TypeError) as exc:
            raise SpecError("training", str(exc)) from exc

    # -- derived configs --------------------------------------------------

    def scenario_config_for(self, seed: int) -> ScenarioConfig:
        base = load_config(self.scenario_config) if self.scenario_config else ScenarioConfig()
        values = dataclasses.asdict(base)
        values.update(self.scenario)
        values["seed"] = int(seed)
        return config_from_mapping(values)

    def feature_config(self) -> FeatureConfig:
        return _apply(FeatureConfig(), self.feature, "feature")

    def train_config(self, seed: int) -> TrainConfig:
        top, pos, cor, feat = {}, {}, {}, dict(self.feature)
        for key, value in self.training.items():
            head, _, rest = key.partition(".")
            if rest and head == "positioning":
                pos[rest] = value
            elif rest and head == "correction":
                cor[rest] = value
            elif rest and head == "feature":
                feat[rest] = value
            elif rest:
                raise ValueError(f"unknown training key {key!r}")
            else:
                top[key] = value
        base = TrainConfig()
        cfg = _apply(base, top, "training")
        cfg = dataclasses.replace(cfg, seed=int(seed),
                                  positioning=_apply(cfg.positioning, pos, "positioning"),
                                  correction=_apply(cfg.correction, cor, "correction"),
                                  feature=_apply(cfg.feature, feat, "feature"))
        cfg.positioning.validate()
        cfg.correction.validate()
        cfg.feature.validate()
        return cfg

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["seeds"] = list(self.seeds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown spec field")
        return cls(**doc)


def _coerce_like(default, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if text.lower() == "none":
        return None
    if isinstance(default, int):
        return int(float(text))
    if isinstance(default, float) or default is None:
        try:
            return float(text)
        except ValueError:
            return text
    return text


def _apply(obj, overrides: dict, label: str):
    """``dataclasses.replace`` with string values coerced to the field's current type."""
    names = {f.name for f in dataclasses.fields(obj)}
    kwargs = {}
    for key, value in overrides.items():
        if key not in names:
            raise ValueError(f"unknown {label} key {key!r}")
        kwargs[key] = _coerce_like(getattr(obj, key), value)
    return dataclasses.replace(obj, **kwargs)


# --------------------------------------------------------------------------
# ini specs


LIST_FIELDS = ("seeds",)
DICT_SECTIONS = ("scenario", "training", "feature")


def load_spec(path, **overrides) -> ExperimentSpec:
    """Read an INI spec: ``[experiment]`` scalars plus ``[scenario]``, ``[training]``, ``[feature]`` tables.

    Keyword ``overrides`` (e.g. parsed command-line flags) win over the file.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    doc: dict = {}
    if parser.has_section("experiment"):
        defaults = ExperimentSpec()
        for key, raw in parser.items("experiment"):
            if key in LIST_FIELDS:
                doc[key] = tuple(int(v) for v in raw.replace(",", " ").split())
            elif key in DICT_SECTIONS or not hasattr(defaults, key):
                raise SpecError(key, "unknown spec field")
            else:
                doc[key] = _coerce_like(getattr(defaults, key), raw)
    for section in DICT_SECTIONS:
        if parser.has_section(section):
            doc[section] = dict(parser.items(section))
    for key, value in overrides.items():
        if value is None:
            continue
        if key in DICT_SECTIONS:
            doc[key] = {**doc.get(key, {}), **value}
        else:
            doc[key] = value
    return ExperimentSpec.from_dict(doc)


# --------------------------------------------------------------------------
# per-seed pipelines


def _db(values):
    return 10 * np.log10(np.maximum(values, 1e-30))


def query_subset(spec: ExperimentSpec, rss_query, anchor, ap_xy, area_side) -> np.ndarray:
    """AP columns used to match one fingerprint query.

    The per-AP coefficient is the measured RSS in dB (strongest links first);
    ``closest_distance`` measures from ``anchor``, the all-AP top-1 match.
    """
    M = len(rss_query)
    if spec.subset_size is None and spec.scheme != "threshold":
        return np.arange(M)
    coeffs = _db(rss_query)
    if spec.scheme == "threshold":
        chosen = select_evaluation_subset(coeffs, M, "threshold", threshold=spec.subset_threshold)
        if chosen.size == 0:
            chosen = np.array([int(np.argmax(coeffs))])
        return chosen if spec.subset_size is None else chosen[:spec.subset_size]
    return select_evaluation_subset(coeffs, spec.subset_size, spec.scheme, ap_xy=ap_xy, point=anchor,
                                    area_side=area_side)


def fingerprint_estimates(scenario, spec: ExperimentSpec, db, feature_cfg: FeatureConfig) -> np.ndarray:
    """Estimated (K, 2) positions of every UE from its measured features."""
    rss, theta = measured_feature_arrays(scenario, feature_cfg)
    side, wrap = scenario.config.area_side, scenario.config.wrap_around
    out = np.empty((scenario.K, 2))
    for k in range(scenario.K):
        anchor = None
        if spec.scheme == "closest_distance" and spec.subset_size is not None:
            scores = fingerprint_scores(rss[k], theta[k], db.rss, db.theta, spec.metric)
            anchor = knn_from_scores(scores, db.points, 1, "basic", side, wrap, k).xy_hat
        cols = query_subset(spec, rss[k], anchor, scenario.placement.ap_xy, side if wrap else None)
        scores = fingerprint_scores(rss[k][cols], theta[k][:, cols], db.rss[:, cols], db.theta[:, :, cols],
                                    spec.metric)
        out[k] = knn_from_scores(scores, db.points, spec.k_neighbors, spec.estimation, side, wrap, k).xy_hat
    return out


def random_estimates(scenario, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), TAG_RANDOM])
    return rng.uniform(0.0, scenario.config.area_side, size=(scenario.K, 2))


def heatgrid_data(scenario, ue: int = 0, spacing: float = 2.0, feature_cfg: FeatureConfig = FeatureConfig()):
    """Angle, normalised distance and joint coefficient of one UE over a grid: (points, angle, dn, joint)."""
    pts = reference_grid(scenario.config.area_side, spacing)
    rss, theta = measured_feature_arrays(scenario, feature_cfg)
    rss_grid, theta_grid = hypothesis_feature_arrays(scenario, pts, cfg=feature_cfg)
    angle, dn, joint = grid_similarity(rss[ue], theta[ue], rss_grid, theta_grid)
    return pts, angle, dn, joint


def _tags(spec: ExperimentSpec, config: ScenarioConfig) -> dict:
    tags = {"M": config.ap_count, "N": config.antennas_per_ap, "K": config.ue_count,
            "L": config.ap_count if spec.subset_size is None else int(spec.subset_size)}
    if spec.method.startswith("fingerprint"):
        tags["eta"] = float(spec.eta)
    return tags


def _echo(spec: ExperimentSpec, config: ScenarioConfig, train_cfg=None) -> dict:
    spec_doc = spec.to_dict()
    # where artifacts land and how many workers ran them does not change their content
    for key in ("output_dir", "workers", "seeds", "scenario_config"):
        spec_doc.pop(key)
    doc = {"spec": spec_doc, "scenario": dataclasses.asdict(config), "code_version": __version__}
    if train_cfg is not None:
        doc["training"] = dataclasses.asdict(train_cfg)
    return doc


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def write_report(directory, report: EvalReport) -> None:
    directory = Path(directory)
    _dump_json(directory / "report.json", report.to_dict())
    with open(directory / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ue", "x", "y", "x_hat", "y_hat", "error"])
        for row in report.csv_rows():
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])


def read_report(directory) -> EvalReport:
    return EvalReport.from_dict(json.loads((Path(directory) / "report.json").read_text()))


def seed_dir(spec: ExperimentSpec, seed: int) -> Path:
    return Path(spec.output_dir) / spec.method / f"seed_{int(seed)}"


def run_seed(spec: ExperimentSpec, seed: int) -> EvalReport:
    """Build, train or match, estimate and persist one seed; returns its report."""
    config = spec.scenario_config_for(seed)
    scenario = build_scenario(config)
    out = seed_dir(spec, seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(scenario.to_json() + "\n")
    side = config.area_side if config.wrap_around else None
    feature_cfg = spec.feature_config()
    files = ["report.csv", "report.json", "scenario.json"]
    tags = _tags(spec, config)
    train_cfg = None
    training = []

    if spec.method == "jpc_maddpg":
        train_cfg = spec.train_config(seed)
        result = train_jpc(scenario, train_cfg,
                           progress=lambda ep, lg: log.debug("seed %d episode %d rmse %.2f", seed, ep,
                                                             lg.eval_rmse[-1]))
        est = result.estimate()
        training = result.log.rows()
        result.log.write_csv(out / "training_log.csv")
        for name, net in (("positioning_actor", result.positioning.actor),
                          ("positioning_critic", result.positioning.critic),
                          ("correction_actor", result.correction.actor),
                          ("correction_critic", result.correction.critic)):
            (out / f"{name}.txt").write_text(net.to_text())
            files.append(f"{name}.txt")
        files.append("training_log.csv")
        tags["random_action_rmse"] = random_action_rmse(scenario, spec.random_draws, seed, train_cfg)
    elif spec.method == "random_baseline":
        est = random_estimates(scenario, seed)
    else:
        db = build_fingerprint_db(scenario, spec.eta, feature_cfg)
        est = fingerprint_estimates(scenario, spec, db, feature_cfg)

    report = EvalReport.from_estimates(spec.method, seed, scenario.placement.ue_xy, est, side,
                                       config=_echo(spec, config, train_cfg), tags=tags, training=training)
    write_report(out, report)
    manifest = {"schema_version": SCHEMA_VERSION, "code_version": __version__, "method": spec.method,
                "seed": int(seed), "files": sorted(files), "config": report.config}
    _dump_json(out / "manifest.json", manifest)
    log.info("%s seed %d rmse %.3f", spec.method, seed, report.rmse)
    return report


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    reports: list
    failed: dict = field(default_factory=dict)  # seed -> error text

    def summary(self) -> dict:
        values = np.array([r.rmse for r in self.reports], dtype=float)
        stats = {"mean": None, "median": None, "std": None}
        if values.size:
            stats = {"mean": float(values.mean()), "median": float(np.median(values)), "std": float(values.std())}
        return {"schema_version": SCHEMA_VERSION, "code_version": __version__, "method": self.spec.method,
                "rmse": stats, "per_seed": [{"seed": r.seed, "rmse": r.rmse} for r in self.reports],
                "failed": {str(k): v for k, v in sorted(self.failed.items())}}


def write_summary(directory, result: ExperimentResult) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = result.summary()
    _dump_json(directory / "summary.json", doc)
    with open(directory / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", "rmse"])
        for row in doc["per_seed"]:
            writer.writerow([result.spec.method, row["seed"], repr(row["rmse"])])


def _run_seed_safe(args):
    spec, seed = args
    try:
        return seed, run_seed(spec, seed), None
    except Exception as exc:  # noqa: BLE001 - recorded and re-raised after the other seeds finish
        return seed, None, f"{type(exc).__name__}: {exc}"


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Every seed of ``spec``; a failing seed leaves the others' artifacts intact.

    Raises ``RuntimeError`` after writing the summary when any seed failed.
    """
    spec.validate()
    jobs = [(spec, s) for s in spec.seeds]
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = list(pool.map(_run_seed_safe, jobs))
    else:
        outcomes = [_run_seed_safe(j) for j in jobs]
    reports = [rep for _, rep, _ in outcomes if rep is not None]
    failed = {seed: err for seed, _, err in outcomes if err is not None}
    result = ExperimentResult(spec, reports, failed)
    write_summary(Path(spec.output_dir) / spec.method, result)
    if failed:
        raise RuntimeError(f"seeds failed: {failed}")
    return result


def run_sweep(spec: ExperimentSpec, name: str, values) -> list:
    """Repeat ``spec`` with one scenario field (or ``eta``/``subset_size``) set to each value.

    Each point lands under ``<output_dir>/<name>_<value>``; returns all reports.
    """
    reports = []
    for value in values:
        point = dataclasses.replace(spec, output_dir=str(Path(spec.output_dir) / f"{name}_{value}"),
                                    scenario=dict(spec.scenario))
        if name == "eta":
            point.eta = float(value)
        elif name in ("subset_size", "k_neighbors"):
            setattr(point, name, int(value))
        else:
            point.scenario[name] = value
        reports += run_experiment(point).reports
    return reports


def collect_reports(root) -> list:
    """Every ``report.json`` below ``root``, in sorted path order."""
    return [EvalReport.from_dict(json.loads(p.read_text())) for p in sorted(Path(root).rglob("report.json"))]


# --------------------------------------------------------------------------
# plot data


def _check_schema(reports) -> None:
    if not reports:
        raise ValueError("no reports to emit")
    keys = None
    for r in reports:
        if not isinstance(r, EvalReport):
            raise ValueError(f"schema mismatch: expected EvalReport, got {type(r).__name__}")
        these = (tuple(sorted(r.to_dict())), tuple(sorted(k for k in ("M", "N", "L") if k in r.tags)))
        if keys is None:
            keys = these
        elif these != keys:
            raise ValueError("schema mismatch between reports")


def emit_plot_data(reports, out_dir, heatgrid=None) -> list:
    """One tidy CSV per figure family; returns the written paths.

    ``heatgrid`` is an optional ``(points, angle, distance_normalized, joint)``
    tuple; without it ``heatgrid.csv`` holds only its header.
    """
    _check_schema(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = sorted(reports, key=lambda r: (r.method, json.dumps(r.tags, sort_keys=True), r.seed))
    paths = []

    def write(name, header, rows):
        path = out / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        paths.append(path)

    write("cdf.csv", ["method", "seed", "M", "N", "L", "error", "fraction"],
          [[r.method, r.seed, r.tags.get("M"), r.tags.get("N"), r.tags.get("L"), float(e), float(f)]
           for r in reports for e, f in r.cdf])
    write("convergence.csv", ["method", "seed", "episode", "reward_positioning", "reward_correction", "eval_rmse"],
          [[r.method, r.seed, int(row[0]), *map(float, row[1:])] for r in reports for row in r.training])
    for axis in ("M", "N", "L"):
        write(f"rmse_vs_{axis}.csv", ["method", axis, "seed", "rmse"],
              [[r.method, r.tags.get(axis), r.seed, float(r.rmse)] for r in reports])
    path = out / "heatgrid.csv"
    if heatgrid is None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["x", "y", "angle", "distance_normalized", "joint"])
    else:
        write_heatgrid(path, *heatgrid)
    paths.append(path)
    return paths

