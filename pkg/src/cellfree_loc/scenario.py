"""Deployment geometry and large-scale propagation state.

A :class:`Scenario` is an immutable bundle of AP/UE placements plus the
per-link large-scale quantities (gain, Rician factor, arrival angles) that the
channel and feature modules consume. Everything is a pure function of the
:class:`ScenarioConfig` and its seed.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

LOS_MODES = ("always_los", "always_nlos", "probabilistic")
AP_LAYOUTS = ("uniform", "grid")

# stream tags keep independent consumers of one seed apart
TAG_PLACEMENT = 11
TAG_NLOS_ANGLES = 23


@dataclass(frozen=True)
class ScenarioConfig:
    area_side: float = 100.0
    ap_count: int = 9
    ue_count: int = 3
    antennas_per_ap: int = 8
    paths_per_link: int = 6
    height_gap: float = 10.0
    pilot_length: int | None = None
    tx_power: float = 0.1
    bandwidth: float = 20e6
    noise_figure: float = 7.0
    coherence_block: int = 200
    seed: int = 0
    los_mode: str = "always_nlos"
    los_threshold: float = 50.0
    ap_layout: str = "uniform"
    wrap_around: bool = True
    carrier_frequency: float = 10e9
    spacing_ratio: float = 0.5
    pathloss_offset: float = 140.7
    pathloss_d0: float = 10.0
    pathloss_d1: float = 50.0
    angle_cell: float = 1.0

    @property
    def tau_p(self) -> int:
        return self.ue_count if self.pilot_length is None else self.pilot_length

    def validate(self) -> None:
        for name in ("ap_count", "ue_count", "antennas_per_ap", "paths_per_link", "coherence_block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("area_side", "tx_power", "bandwidth", "angle_cell"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.height_gap < 0:
            raise ValueError("height_gap must be >= 0")
        if self.tau_p != self.ue_count:
            raise ValueError(
                f"pilot_length must equal ue_count (orthogonal pilots), got {self.tau_p} != {self.ue_count}"
            )
        if self.tau_p > self.coherence_block:
            raise ValueError("pilot_length cannot exceed coherence_block")
        if self.los_mode not in LOS_MODES:
            raise ValueError(f"los_mode must be one of {LOS_MODES}, got {self.los_mode!r}")
        if self.ap_layout not in AP_LAYOUTS:
            raise ValueError(f"ap_layout must be one of {AP_LAYOUTS}, got {self.ap_layout!r}")
        if not 0 < self.pathloss_d0 < self.pathloss_d1:
            raise ValueError("path-loss breakpoints need 0 < d0 < d1")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    @property
    def noise_power_dbm(self) -> float:
        return noise_power_dbm(self.bandwidth, self.noise_figure)

    @property
    def noise_power(self) -> float:
        """Noise power in watts."""
        return 10 ** ((self.noise_power_dbm - 30.0) / 10.0)


def _coerce(value: str, kind):
    value = value.strip()
    if kind is bool:
        return value.lower() in ("1", "true", "yes", "on")
    if value.lower() in ("none", ""):
        return None
    if kind is int:
        return int(float(value))
    if kind is float:
        return float(value)
    return value


_FIELD_KINDS = {
    f.name: (bool if f.type == "bool" else int if f.type.startswith("int") else float if f.type == "float" else str)
    for f in dataclasses.fields(ScenarioConfig)
}


def config_from_mapping(values: dict) -> ScenarioConfig:
    """Build a config from flat string (or native) values keyed by field name."""
    kwargs = {}
    for key, raw in values.items():
        if key not in _FIELD_KINDS:
            raise ValueError(f"unknown scenario config key {key!r}")
        kwargs[key] = _coerce(raw, _FIELD_KINDS[key]) if isinstance(raw, str) else raw
    return ScenarioConfig(**kwargs)


def load_config(path: str | Path, section: str = "scenario") -> ScenarioConfig:
    """Read a flat ``key = value`` INI file (section ``[scenario]``)."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    if not parser.has_section(section):
        return ScenarioConfig()
    return config_from_mapping(dict(parser.items(section)))


def noise_power_dbm(bandwidth: float, noise_figure_db: float) -> float:
    return -174.0 + 10.0 * math.log10(bandwidth) + noise_figure_db


def _planar_offset(p, q, area_side, wrap=True):
    delta = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
    if wrap:
        delta = delta - area_side * np.round(delta / area_side)
    return delta


def wrap_distance(p, q, area_side: float, height_gap: float, wrap: bool = True):
    """Distance between ``p`` and ``q`` on the wrapped area including the height gap.

    Broadcasts over leading axes; the last axis holds (x, y).
    """
    delta = _planar_offset(p, q, area_side, wrap)
    return np.sqrt(np.sum(delta**2, axis=-1) + height_gap**2)


def path_loss_db(d, offset: float = 140.7, d0: float = 10.0, d1: float = 50.0):
    """Three-slope large-scale gain in dB (negative numbers)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    d_km = d / 1000.0
    d0_km, d1_km = d0 / 1000.0, d1 / 1000.0
    far = -offset - 35.0 * np.log10(d_km)
    mid = -offset - 15.0 * math.log10(d1_km) - 20.0 * np.log10(d_km)
    near = -offset - 15.0 * math.log10(d1_km) - 20.0 * math.log10(d0_km)
    out = np.where(d > d1, far, np.where(d > d0, mid, near))
    return out if out.ndim else float(out)


def path_loss(d, offset: float = 140.7, d0: float = 10.0, d1: float = 50.0):
    """Linear large-scale gain ``beta`` for distance ``d`` in meters."""
    gain = 10.0 ** (np.asarray(path_loss_db(d, offset, d0, d1)) / 10.0)
    return gain if gain.ndim else float(gain)


def rician_factor(d, los):
    """Rician kappa: ``10**(1.3 - 0.003 d)`` on LoS links, zero otherwise."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    kappa = np.where(np.asarray(los, dtype=bool), 10.0 ** (1.3 - 0.003 * d), 0.0)
    return kappa if kappa.ndim else float(kappa)


def los_angle(ap_xy, points, area_side: float, wrap: bool = True):
    """Arrival angle in [0, pi] of the AP->point ray w.r.t. the array axis (+x).

    ``ap_xy`` is (M, 2), ``points`` is (P, 2); returns (M, P). A point directly
    below the AP gets pi/2.
    """
    delta = _planar_offset(np.asarray(ap_xy)[:, None, :], np.asarray(points)[None, :, :], area_side, wrap)
    planar = np.hypot(delta[..., 0], delta[..., 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_theta = np.where(planar > 0, delta[..., 0] / np.where(planar > 0, planar, 1.0), 0.0)
    return np.arccos(np.clip(cos_theta, -1.0, 1.0))


def angle_cells(points, cell: float):
    """Integer cell indices used to key position-frozen scattering."""
    return np.floor(np.asarray(points, dtype=float) / cell).astype(np.int64)


def nlos_angles(seed: int, ap_indices, points, paths: int, cell: float = 1.0):
    """NLoS arrival angles, uniform on [0, pi], frozen per (seed, AP, cell).

    Any two positions that fall in the same ``cell``-sized square see the same
    scatterers from a given AP, so measured and hypothesised features agree
    whenever the hypothesis lands in the UE's cell. Returns (len(ap_indices), P, paths).
    """
    cells = angle_cells(np.atleast_2d(points), cell).astype(np.uint64)
    ap_indices = np.atleast_1d(np.asarray(ap_indices)).astype(np.uint64)
    key = _mix(np.full(1, int(seed) & _MASK, dtype=np.uint64) ^ np.uint64(TAG_NLOS_ANGLES))
    key = _mix(key ^ ap_indices)[:, None, None]
    key = _mix(key ^ cells[None, :, None, 0])
    key = _mix(key ^ cells[None, :, None, 1])
    key = _mix(key ^ np.arange(paths, dtype=np.uint64)[None, None, :])
    return (key >> np.uint64(11)).astype(float) * (np.pi / 2.0**53)


_MASK = 2**64 - 1


def _mix(x):
    """splitmix64 finaliser: a counter-based hash, vectorised over uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@dataclass(frozen=True)
class Placement:
    ap_xy: np.ndarray
    ue_xy: np.ndarray

    def __post_init__(self):
        if self.ap_xy.ndim != 2 or self.ap_xy.shape[1] != 2:
            raise ValueError("ap_xy must be (M, 2)")
        if self.ue_xy.ndim != 2 or self.ue_xy.shape[1] != 2:
            raise ValueError("ue_xy must be (K, 2)")


@dataclass(frozen=True)
class LinkState:
    beta: float
    kappa: float
    los_angle: float
    nlos_angles: np.ndarray
    distance: float
    los: bool = False


def _place_aps(config: ScenarioConfig, rng) -> np.ndarray:
    if config.ap_layout == "grid":
        side = math.ceil(math.sqrt(config.ap_count))
        step = config.area_side / side
        coords = [((i + 0.5) * step, (j + 0.5) * step) for j in range(side) for i in range(side)]
        return np.array(coords[: config.ap_count])
    return rng.uniform(0.0, config.area_side, size=(config.ap_count, 2))


def draw_placement(config: ScenarioConfig) -> Placement:
    rng = np.random.default_rng([config.seed, TAG_PLACEMENT])
    ap_xy = _place_aps(config, rng)
    ue_xy = rng.uniform(0.0, config.area_side, size=(config.ue_count, 2))
    return Placement(ap_xy=ap_xy, ue_xy=ue_xy)


@dataclass(frozen=True)
class Scenario:
    """Placement plus (M, K) arrays of per-link large-scale state."""

    config: ScenarioConfig
    placement: Placement
    beta: np.ndarray
    kappa: np.ndarray
    los_angle: np.ndarray
    nlos_angles: np.ndarray
    distance: np.ndarray
    los: np.ndarray
    noise_power: float = field(default=0.0)

    @property
    def M(self) -> int:
        return self.config.ap_count

    @property
    def K(self) -> int:
        return self.config.ue_count

    @property
    def N(self) -> int:
        return self.config.antennas_per_ap

    def link(self, m: int, k: int) -> LinkState:
        return LinkState(
            beta=float(self.beta[m, k]),
            kappa=float(self.kappa[m, k]),
            los_angle=float(self.los_angle[m, k]),
            nlos_angles=self.nlos_angles[m, k].copy(),
            distance=float(self.distance[m, k]),
            los=bool(self.los[m, k]),
        )

    def with_ue_positions(self, ue_xy) -> "Scenario":
        """Same APs and config, UEs moved to ``ue_xy`` (K', 2)."""
        ue_xy = np.asarray(ue_xy, dtype=float).reshape(-1, 2)
        config = self.config.replace(ue_count=len(ue_xy), pilot_length=None)
        return _assemble(config, Placement(self.placement.ap_xy, ue_xy))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": dataclasses.asdict(self.config),
            "ap_xy": self.placement.ap_xy.tolist(),
            "ue_xy": self.placement.ue_xy.tolist(),
            "beta": self.beta.tolist(),
            "kappa": self.kappa.tolist(),
            "los_angle": self.los_angle.tolist(),
            "nlos_angles": self.nlos_angles.tolist(),
            "distance": self.distance.tolist(),
            "los": self.los.astype(int).tolist(),
            "noise_power": self.noise_power,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema {doc.get('schema_version')!r}")
        return cls(
            config=ScenarioConfig(**doc["config"]),
            placement=Placement(np.array(doc["ap_xy"], dtype=float), np.array(doc["ue_xy"], dtype=float)),
            beta=np.array(doc["beta"], dtype=float),
            kappa=np.array(doc["kappa"], dtype=float),
            los_angle=np.array(doc["los_angle"], dtype=float),
            nlos_angles=np.array(doc["nlos_angles"], dtype=float),
            distance=np.array(doc["distance"], dtype=float),
            los=np.array(doc["los"], dtype=bool),
            noise_power=float(doc["noise_power"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def link_state_arrays(config: ScenarioConfig, ap_xy, points, ap_indices=None, angles: bool = True):
    """Large-scale state from every AP to every point: dict of (M, P[, L]) arrays.

    ``ap_indices`` names the APs in ``ap_xy`` (defaults to 0..M-1); it keys the
    frozen scattering so that AP subsets see the same angles as the full set.
    """
    ap_xy = np.asarray(ap_xy, dtype=float)
    if ap_indices is None:
        ap_indices = np.arange(len(ap_xy))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    distance = wrap_distance(ap_xy[:, None, :], points[None, :, :], config.area_side, config.height_gap,
                             config.wrap_around)
    beta = path_loss(distance, config.pathloss_offset, config.pathloss_d0, config.pathloss_d1)
    if config.los_mode == "always_los":
        los = np.ones_like(distance, dtype=bool)
    elif config.los_mode == "always_nlos":
        los = np.zeros_like(distance, dtype=bool)
    else:
        # heuristic distance threshold, not a measured LoS probability model
        los = distance <= config.los_threshold
    out = {
        "distance": distance,
        "beta": np.asarray(beta, dtype=float),
        "los": los,
        "kappa": np.asarray(rician_factor(distance, los), dtype=float),
    }
    if angles:
        out["los_angle"] = los_angle(ap_xy, points, config.area_side, config.wrap_around)
        out["nlos_angles"] = nlos_angles(config.seed, ap_indices, points, config.paths_per_link,
                                         config.angle_cell)
    return out


def _assemble(config: ScenarioConfig, placement: Placement) -> Scenario:
    state = link_state_arrays(config, placement.ap_xy, placement.ue_xy)
    return Scenario(config=config, placement=placement, noise_power=config.noise_power, **state)


def build_scenario(config: ScenarioConfig) -> Scenario:
    config.validate()
    return _assemble(config, draw_placement(config))
