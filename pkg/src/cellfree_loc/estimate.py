"""Position fusion (Co-WKNN), fingerprint baselines and accuracy metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureConfig, FeatureSet, feature_header, hypothesis_feature_arrays
from .scenario import Scenario
from .similarity import EPS, joint_similarity

METRICS = ("rss", "aoa", "joint")
MODES = ("basic", "knn", "wknn")


@dataclass
class PositionEstimate:
    ue_index: int
    xy_hat: np.ndarray
    contributing: np.ndarray  # AP indices (Co-WKNN) or reference-point indices (fingerprint)
    weights: np.ndarray
    per_ap_joint: np.ndarray | None = None


# --------------------------------------------------------------------------
# geometry helpers


def min_image(delta, area_side=None):
    delta = np.asarray(delta, dtype=float)
    if area_side is None:
        return delta
    return delta - area_side * np.round(delta / area_side)


def project(ap_xy, d_hat, theta_hat, offset=0.0, area_side=None, wrap: bool = False) -> np.ndarray:
    """AP position plus ``d_hat`` along ``theta_hat + offset``.

    With ``area_side`` the point is clamped to the area, or folded back onto
    the torus when ``wrap`` is set.
    """
    ap_xy = np.asarray(ap_xy, dtype=float)
    ang = np.asarray(theta_hat, dtype=float) + np.asarray(offset, dtype=float)
    d_hat = np.asarray(d_hat, dtype=float)
    pts = ap_xy + np.stack([d_hat * np.cos(ang), d_hat * np.sin(ang)], axis=-1)
    if area_side is not None:
        pts = np.mod(pts, area_side) if wrap else np.clip(pts, 0.0, area_side)
    return pts


def weighted_mean(points, weights, area_side=None, wrap: bool = False) -> np.ndarray:
    """Convex combination; with ``wrap`` the points are unwrapped around the first one."""
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if wrap and area_side is not None:
        anchor = points[0]
        points = anchor + min_image(points - anchor, area_side)
        return np.mod(weights @ points, area_side)
    out = weights @ points
    return np.clip(out, 0.0, area_side) if area_side is not None else out


# --------------------------------------------------------------------------
# Co-WKNN


def cowknn_select(coeffs, threshold, max_count: int) -> np.ndarray:
    """Zero-based APs with coefficient >= threshold, best first, at most ``max_count``.

    Falls back to the single best AP when none passes.
    """
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    coeffs = np.asarray(coeffs, dtype=float)
    order = np.argsort(-coeffs, kind="stable")
    chosen = order[coeffs[order] >= threshold][:max_count]
    return chosen if chosen.size else order[:1]


def cowknn_weights(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size == 0 or np.any(coeffs <= 0):
        raise ValueError("Co-WKNN weights need positive coefficients")
    w = coeffs / np.sum(coeffs)
    # absorb rounding so the weights sum to one as tightly as floats allow
    w[np.argmax(w)] += 1.0 - np.sum(w)
    return w


def default_threshold(coeffs) -> float:
    return float(np.median(coeffs))


def default_max_count(ap_count: int) -> int:
    return int(np.ceil(ap_count / 2))


def cowknn_estimate(d_hat, theta_hat, offset, ap_xy, per_ap_joint, threshold=None, max_count=None,
                    area_side=None, wrap: bool = False, ue_index: int = 0) -> PositionEstimate:
    """Fuse the per-AP projected points of one UE.

    ``d_hat``, ``theta_hat``, ``offset`` and ``per_ap_joint`` are length-M.
    """
    per_ap_joint = np.asarray(per_ap_joint, dtype=float)
    if threshold is None:
        threshold = default_threshold(per_ap_joint)
    if max_count is None:
        max_count = default_max_count(per_ap_joint.size)
    chosen = cowknn_select(per_ap_joint, threshold, max_count)
    w = cowknn_weights(per_ap_joint[chosen])
    pts = project(np.asarray(ap_xy)[chosen], np.asarray(d_hat)[chosen], np.asarray(theta_hat)[chosen],
                  np.asarray(offset)[chosen], area_side, wrap)
    return PositionEstimate(ue_index=ue_index, xy_hat=weighted_mean(pts, w, area_side, wrap),
                            contributing=chosen, weights=w, per_ap_joint=per_ap_joint)


# --------------------------------------------------------------------------
# fingerprint database


def grid_axis(area_side: float, spacing: float) -> np.ndarray:
    if not 0 < spacing <= area_side:
        raise ValueError("spacing must lie in (0, area_side]")
    count = int(np.floor(area_side / spacing + 1e-9)) + 1
    return np.arange(count) * spacing


def reference_grid(area_side: float, spacing: float) -> np.ndarray:
    axis = grid_axis(area_side, spacing)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class FingerprintDb:
    spacing: float
    points: np.ndarray  # (P, 2)
    rss: np.ndarray  # (P, M)
    theta: np.ndarray  # (P, N, M)

    def __len__(self) -> int:
        return len(self.points)

    def feature_set(self, i: int) -> FeatureSet:
        return FeatureSet(rss=self.rss[i], angular_power=self.theta[i], source="hypothesis",
                          position=tuple(float(v) for v in self.points[i]))

    def save(self, directory) -> None:
        """Write ``points.csv`` (index, x, y) and ``features.csv`` (one row per point)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "points.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "x", "y", "spacing"])
            for i, (x, y) in enumerate(self.points):
                writer.writerow([i, repr(float(x)), repr(float(y)), repr(float(self.spacing))])
        N, M = self.theta.shape[1:]
        with open(directory / "features.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(feature_header(N, M))
            flat = np.concatenate([self.points, self.rss, self.theta.reshape(len(self), -1)], axis=1)
            for row in flat:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def load(cls, directory) -> "FingerprintDb":
        directory = Path(directory)
        with open(directory / "points.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        spacing = float(rows[0][3])
        with open(directory / "features.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(v) for v in row] for row in reader])
        M = sum(1 for c in header if c.startswith("rss_"))
        N = (len(header) - 2 - M) // M
        return cls(spacing=spacing, points=data[:, :2], rss=data[:, 2:2 + M],
                   theta=data[:, 2 + M:].reshape(-1, N, M))


def build_fingerprint_db(scenario: Scenario, spacing: float, cfg: FeatureConfig = FeatureConfig(),
                         chunk: int = 2048) -> FingerprintDb:
    """Hypothesis features on a uniform grid of ``floor(side/spacing) + 1`` points per axis."""
    pts = reference_grid(scenario.config.area_side, spacing)
    rss, theta = [], []
    for start in range(0, len(pts), chunk):
        r, t = hypothesis_feature_arrays(scenario, pts[start:start + chunk], cfg=cfg)
        rss.append(r)
        theta.append(t)
    return FingerprintDb(spacing=float(spacing), points=pts, rss=np.concatenate(rss),
                         theta=np.concatenate(theta))


def fingerprint_scores(query_rss, query_theta, db_rss, db_theta, metric: str = "joint") -> np.ndarray:
    """Similarity of the query to every reference point (higher is closer)."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    db_rss = np.asarray(db_rss, dtype=float)
    if metric in ("rss", "joint"):
        dist = np.linalg.norm(db_rss - np.asarray(query_rss, dtype=float), axis=1)
        top = dist.max()
        dn = dist / top if top > 0 else np.zeros_like(dist)
        if metric == "rss":
            return 1.0 / (dn + EPS)
    q = np.asarray(query_theta, dtype=float)
    t = np.asarray(db_theta, dtype=float)
    num = np.einsum("nm,pnm->pm", q, t)
    den = np.linalg.norm(q, axis=0)[None, :] * np.linalg.norm(t, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(den > 0, num / den, 0.0)
    angle = np.clip(cos, 0.0, 1.0).mean(axis=1)
    if metric == "aoa":
        return angle
    return joint_similarity(dn, angle)


def knn_from_scores(scores, points, k: int, mode: str = "wknn", area_side=None, wrap: bool = False,
                    ue_index: int = 0) -> PositionEstimate:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    scores = np.asarray(scores, dtype=float)
    if not 1 <= k <= scores.size:
        raise ValueError(f"k={k} outside [1, {scores.size}]")
    if mode == "basic":
        k = 1
    order = np.argsort(-scores, kind="stable")[:k]
    if mode == "wknn":
        s = scores[order]
        w = s / s.sum() if s.sum() > 0 else np.full(k, 1.0 / k)
    else:
        w = np.full(k, 1.0 / k)
    xy = weighted_mean(np.asarray(points, dtype=float)[order], w, area_side, wrap)
    return PositionEstimate(ue_index=ue_index, xy_hat=xy, contributing=order, weights=w)


def knn_wknn_estimate(query: FeatureSet, db: FingerprintDb, k: int = 4, weighted: bool = True,
                      metric: str = "joint", basic: bool = False, area_side=None, wrap: bool = False,
                      ue_index: int = 0) -> PositionEstimate:
    """Fingerprint match of one query; ``basic`` keeps only the best reference point."""
    if len(db) == 0:
        raise ValueError("empty fingerprint database")
    scores = fingerprint_scores(query.rss, query.angular_power, db.rss, db.theta, metric)
    mode = "basic" if basic else ("wknn" if weighted else "knn")
    return knn_from_scores(scores, db.points, k, mode, area_side, wrap, ue_index)


# --------------------------------------------------------------------------
# metrics


def position_errors(actual, estimated, area_side=None) -> np.ndarray:
    actual = np.atleast_2d(np.asarray(actual, dtype=float))
    estimated = np.atleast_2d(np.asarray(estimated, dtype=float))
    if actual.shape != estimated.shape:
        raise ValueError("actual and estimated positions differ in length")
    delta = min_image(estimated - actual, area_side)
    return np.hypot(delta[:, 0], delta[:, 1])


def rmse(actual, estimated, area_side=None) -> float:
    """Root mean square positioning error; min-image distances when ``area_side`` is given."""
    err = position_errors(actual, estimated, area_side)
    top = err.max(initial=0.0)
    if top == 0.0:
        return 0.0
    return float(top * np.sqrt(np.mean((err / top) ** 2)))  # scaled so tiny errors do not underflow


def cdf_curve(errors) -> np.ndarray:
    """Empirical CDF as (error, fraction) rows; tied errors keep the larger fraction."""
    errors = np.sort(np.asarray(errors, dtype=float).ravel())
    n = errors.size
    if n == 0:
        raise ValueError("cdf of an empty error list")
    frac = np.arange(1, n + 1) / n
    last = np.append(errors[1:] != errors[:-1], True)
    return np.stack([errors[last], frac[last]], axis=1)


@dataclass
class EvalReport:
    method: str
    seed: int
    true_xy: np.ndarray
    est_xy: np.ndarray
    per_ue_error: np.ndarray
    rmse: float
    cdf: np.ndarray
    config: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)  # sweep coordinates such as M, N, L, eta
    training: list = field(default_factory=list)  # rows of (episode, mean r_p, mean r_c, eval rmse)

    @classmethod
    def from_estimates(cls, method, seed, true_xy, est_xy, area_side=None, **extra) -> "EvalReport":
        err = position_errors(true_xy, est_xy, area_side)
        return cls(method=method, seed=int(seed), true_xy=np.asarray(true_xy, dtype=float),
                   est_xy=np.asarray(est_xy, dtype=float), per_ue_error=err,
                   rmse=float(np.sqrt(np.mean(err**2))), cdf=cdf_curve(err), **extra)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "true_xy": self.true_xy.tolist(),
            "est_xy": self.est_xy.tolist(),
            "per_ue_error": self.per_ue_error.tolist(),
            "rmse": self.rmse,
            "cdf": self.cdf.tolist(),
            "config": self.config,
            "tags": self.tags,
            "training": [list(r) for r in self.training],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            method=doc["method"], seed=int(doc["seed"]),
            true_xy=np.array(doc["true_xy"], dtype=float).reshape(-1, 2),
            est_xy=np.array(doc["est_xy"], dtype=float).reshape(-1, 2),
            per_ue_error=np.array(doc["per_ue_error"], dtype=float),
            rmse=float(doc["rmse"]), cdf=np.array(doc["cdf"], dtype=float).reshape(-1, 2),
            config=doc.get("config", {}), tags=doc.get("tags", {}),
            training=[list(r) for r in doc.get("training", [])],
        )

    def csv_rows(self) -> list[list]:
        """Flat per-UE rows: ue, x, y, x_hat, y_hat, error."""
        return [[k, *map(float, self.true_xy[k]), *map(float, self.est_xy[k]), float(self.per_ue_error[k])]
                for k in range(len(self.per_ue_error))]
