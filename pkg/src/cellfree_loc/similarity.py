"""Angle, distance and joint similarity between measured and hypothesised features."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

EPS = 1e-6
J_MAX = 1.0 / EPS**2

ANGLE_MODES = ("normalized", "as_written")
SUBSET_SCHEMES = ("highest_similarity", "closest_distance", "threshold")


@dataclass
class SimilarityReport:
    per_ap_angle: np.ndarray
    per_ap_joint: np.ndarray
    aggregate_angle: float
    distance_raw: float
    distance_normalized: float
    joint: float
    subset: np.ndarray
    mode: str = "normalized"


def _column_cosines(actual, hyp) -> np.ndarray:
    """Cosine between matching columns of two (..., N, M) arrays."""
    num = np.sum(actual * hyp, axis=-2)
    den = np.linalg.norm(actual, axis=-2) * np.linalg.norm(hyp, axis=-2)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.clip(out, 0.0, 1.0)


def per_ap_angle(theta_actual, theta_hyp) -> np.ndarray:
    """Per-AP cosine of the N-length angular power columns; zero-norm columns give NaN."""
    return _column_cosines(np.asarray(theta_actual, dtype=float), np.asarray(theta_hyp, dtype=float))


def angle_similarity(theta_actual, theta_hyp, subset=None, mode: str = "normalized"):
    """Aggregate angle similarity over ``subset`` and the per-AP cosines.

    ``normalized`` averages the cosines; ``as_written`` scales the sum by
    ``1/sqrt(|S|)`` and can exceed 1.
    """
    if mode not in ANGLE_MODES:
        raise ValueError(f"mode must be one of {ANGLE_MODES}")
    theta_actual = np.asarray(theta_actual, dtype=float)
    theta_hyp = np.asarray(theta_hyp, dtype=float)
    subset = np.arange(theta_actual.shape[1]) if subset is None else np.asarray(subset, dtype=int)
    a, h = theta_actual[:, subset], theta_hyp[:, subset]
    for j, m in enumerate(subset):
        if not np.any(a[:, j]) or not np.any(h[:, j]):
            raise ValueError(f"zero-norm angular power column at AP {int(m)}")
    cos = _column_cosines(a, h)
    scale = len(subset) if mode == "normalized" else np.sqrt(len(subset))
    return float(np.sum(cos) / scale), cos


def distance_dissimilarity(rss_actual, rss_hyp, subset=None) -> float:
    """Euclidean distance between RSS vectors restricted to ``subset``."""
    rss_actual = np.asarray(rss_actual, dtype=float)
    rss_hyp = np.asarray(rss_hyp, dtype=float)
    if subset is not None:
        subset = np.asarray(subset, dtype=int)
        if subset.size == 0:
            raise ValueError("subset must be nonempty")
        rss_actual, rss_hyp = rss_actual[..., subset], rss_hyp[..., subset]
    return float(np.linalg.norm(rss_actual - rss_hyp))


def normalize_dissimilarity(values) -> np.ndarray:
    """Divide by the maximum over the candidate collection."""
    values = np.asarray(values, dtype=float)
    top = np.max(values) if values.size else 0.0
    if not top > 0:
        raise ValueError("cannot normalise: no positive dissimilarity")
    return values / top


def joint_similarity(distance_normalized, angle):
    """``1 / ((d + eps)(1 - a + eps))`` capped at ``1/eps^2``; accepts arrays."""
    d = np.asarray(distance_normalized, dtype=float)
    a = np.asarray(angle, dtype=float)
    if np.any((d < 0) | (d > 1)) or np.any((a < 0) | (a > 1)):
        raise ValueError("joint similarity inputs must lie in [0, 1]")
    out = np.minimum(1.0 / ((d + EPS) * (1.0 - a + EPS)), J_MAX)
    return out if out.ndim else float(out)


def per_ap_joint(rss_actual, theta_actual, rss_hyp, theta_hyp, rss_scale=None) -> np.ndarray:
    """Per-AP joint coefficient from single-AP RSS gaps and column cosines.

    The RSS gap of each AP is normalised by ``rss_scale`` (default: the
    largest gap across APs).
    """
    gap = np.abs(np.asarray(rss_actual, dtype=float) - np.asarray(rss_hyp, dtype=float))
    scale = np.max(gap) if rss_scale is None else rss_scale
    dn = gap / scale if scale > 0 else np.zeros_like(gap)
    cos = np.nan_to_num(per_ap_angle(theta_actual, theta_hyp), nan=0.0)
    return joint_similarity(np.clip(dn, 0.0, 1.0), cos)


def select_evaluation_subset(coeffs, size: int, scheme: str = "highest_similarity", *, threshold=None,
                             ap_xy=None, point=None, area_side=None) -> np.ndarray:
    """Zero-based AP indices used to score a hypothesis.

    Ties break by ascending AP index for every scheme.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    M = coeffs.size if coeffs.size else (0 if ap_xy is None else len(ap_xy))
    if scheme not in SUBSET_SCHEMES:
        raise ValueError(f"scheme must be one of {SUBSET_SCHEMES}")
    if scheme != "threshold" and not 0 < size <= M:
        raise ValueError(f"subset size {size} outside [1, {M}]")
    if scheme == "highest_similarity":
        # stable sort on the negated key keeps lower indices first among ties
        return np.argsort(-coeffs, kind="stable")[:size]
    if scheme == "closest_distance":
        if ap_xy is None or point is None:
            raise ValueError("closest_distance needs ap_xy and point")
        delta = np.asarray(ap_xy, dtype=float) - np.asarray(point, dtype=float)
        if area_side is not None:
            delta = delta - area_side * np.round(delta / area_side)
        return np.argsort(np.hypot(delta[:, 0], delta[:, 1]), kind="stable")[:size]
    if threshold is None:
        raise ValueError("threshold scheme needs a threshold")
    order = np.argsort(-coeffs, kind="stable")
    return order[coeffs[order] >= threshold]


def compare(rss_actual, theta_actual, rss_hyp, theta_hyp, subset=None, distance_scale=None,
            mode: str = "normalized") -> SimilarityReport:
    """Full similarity breakdown of one hypothesis against one measurement.

    ``distance_scale`` is the normaliser for the distance term; by default the
    raw distance normalises itself (the single-candidate case).
    """
    M = np.asarray(rss_actual).shape[-1]
    subset = np.arange(M) if subset is None else np.asarray(subset, dtype=int)
    agg, _ = angle_similarity(theta_actual, theta_hyp, subset, mode)
    cos = np.nan_to_num(per_ap_angle(theta_actual, theta_hyp), nan=0.0)
    raw = distance_dissimilarity(rss_actual, rss_hyp, subset)
    scale = raw if distance_scale is None else distance_scale
    dn = raw / scale if scale > 0 else 0.0
    joint = joint_similarity(min(dn, 1.0), min(agg, 1.0)) if mode == "normalized" else float("nan")
    return SimilarityReport(
        per_ap_angle=cos,
        per_ap_joint=per_ap_joint(rss_actual, theta_actual, rss_hyp, theta_hyp),
        aggregate_angle=agg,
        distance_raw=raw,
        distance_normalized=dn,
        joint=joint,
        subset=subset,
        mode=mode,
    )


def grid_similarity(rss_actual, theta_actual, rss_grid, theta_grid, subset=None):
    """Angle, normalised distance and joint coefficient for every candidate.

    ``rss_grid`` is (P, M) and ``theta_grid`` (P, N, M); distances normalise
    over the candidate grid. Returns three (P,) arrays.
    """
    rss_grid = np.asarray(rss_grid, dtype=float)
    theta_grid = np.asarray(theta_grid, dtype=float)
    M = rss_grid.shape[1]
    subset = np.arange(M) if subset is None else np.asarray(subset, dtype=int)
    cos = np.nan_to_num(_column_cosines(np.asarray(theta_actual, dtype=float)[None, :, subset],
                                        theta_grid[:, :, subset]), nan=0.0)
    angle = cos.mean(axis=1)
    dist = np.linalg.norm(rss_grid[:, subset] - np.asarray(rss_actual, dtype=float)[subset], axis=1)
    top = dist.max()
    dn = dist / top if top > 0 else np.zeros_like(dist)
    return angle, dn, joint_similarity(dn, np.clip(angle, 0.0, 1.0))


def write_heatgrid(path, points, angle, distance_normalized, joint) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "angle", "distance_normalized", "joint"])
        for (x, y), a, d, j in zip(np.asarray(points), angle, distance_normalized, joint):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(a)), repr(float(d)), repr(float(j))])
