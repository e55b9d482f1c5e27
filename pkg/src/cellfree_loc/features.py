"""Pilot training, LS estimation and RSS / angular-domain feature extraction."""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import block_rng, complex_normal, draw_channels, steering_vector
from .scenario import LinkState, Scenario, link_state_arrays

TAG_HYPOTHESIS = 41

THETA_MODES = ("monte_carlo", "expected")
RSS_MODES = ("hardened", "instant")


@dataclass(frozen=True)
class FeatureConfig:
    realizations: int = 200
    theta_mode: str = "monte_carlo"
    rss_mode: str = "hardened"

    def validate(self) -> None:
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")
        if self.theta_mode not in THETA_MODES:
            raise ValueError(f"theta_mode must be one of {THETA_MODES}")
        if self.rss_mode not in RSS_MODES:
            raise ValueError(f"rss_mode must be one of {RSS_MODES}")


# --------------------------------------------------------------------------
# pilots and LS estimation


@dataclass(frozen=True)
class PilotBook:
    sequences: np.ndarray  # (tau_p, tau_p); column k is phi_k
    assignment: np.ndarray  # UE index -> column index

    @classmethod
    def orthogonal(cls, ue_count: int) -> "PilotBook":
        # DFT columns: unit-modulus entries, ||phi||^2 = tau_p, mutually orthogonal
        return cls(sequences=dft_matrix(ue_count), assignment=np.arange(ue_count))

    @property
    def tau_p(self) -> int:
        return self.sequences.shape[0]

    def pilot(self, k: int) -> np.ndarray:
        return self.sequences[:, self.assignment[k]]

    def co_pilot_set(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == self.assignment[k])


def receive_pilots(h, book: PilotBook, tx_power, noise_power: float, rng) -> np.ndarray:
    """Received pilot block ``Y_m`` (M, N, tau_p) for channels ``h`` (M, K, N)."""
    h = np.asarray(h)
    M, K, N = h.shape
    p = np.broadcast_to(np.asarray(tx_power, dtype=float), (K,))
    phis = np.stack([book.pilot(k) for k in range(K)], axis=1)  # (tau_p, K)
    signal = np.einsum("k,mkn,tk->mnt", np.sqrt(p), h, phis)
    return signal + complex_normal(rng, (M, N, book.tau_p), noise_power)


def despread(Y, book: PilotBook, k: int) -> np.ndarray:
    """``Y phi_k^* / sqrt(tau_p)``: the (M, N) despread pilot signal of UE k."""
    return Y @ np.conj(book.pilot(k)) / np.sqrt(book.tau_p)


def ls_estimate(h_true, tx_power: float, tau_p: int, noise_power: float, rng) -> np.ndarray:
    """LS estimate of ``h_true`` after despreading an orthogonal pilot.

    With one UE per pilot the despread signal is ``sqrt(p tau) h + n`` so the
    estimate is ``h + n / sqrt(p tau)`` with ``n ~ CN(0, sigma^2 I)``.
    """
    gain = tx_power * tau_p
    if gain <= 0:
        raise ValueError("tx_power * tau_p must be positive")
    h_true = np.asarray(h_true)
    if noise_power == 0:
        return h_true.astype(complex)
    return h_true + complex_normal(rng, h_true.shape, noise_power) / np.sqrt(gain)


# --------------------------------------------------------------------------
# RSS


def rss_instant(h, tx_power: float, tau_p: int):
    """``p tau ||h||^2`` over the antenna (last) axis."""
    h = np.asarray(h)
    return tx_power * tau_p * np.sum(np.abs(h) ** 2, axis=-1)


def rss_hardened(beta, n_antennas: int, tx_power: float, tau_p: int):
    """Channel-hardened RSS ``N p tau beta``."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < 0):
        raise ValueError("beta must be non-negative")
    out = n_antennas * tx_power * tau_p * beta
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# angular domain


@functools.lru_cache(maxsize=64)
def _dft(n: int) -> np.ndarray:
    idx = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(idx, idx) / n)
    F.setflags(write=False)
    return F


def dft_matrix(n: int) -> np.ndarray:
    """``F[i, j] = exp(-j 2 pi i j / N)`` (zero-based)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _dft(n).copy()


def angular_response(h_hat) -> np.ndarray:
    """``F h`` applied along the last axis."""
    h_hat = np.asarray(h_hat)
    return h_hat @ _dft(h_hat.shape[-1]).T


def _dirichlet(omega, n_antennas: int):
    """``exp(-j (N-1) w / 2) sin(N w / 2) / sin(w / 2)`` with its limits at w = 2 pi q."""
    omega = np.asarray(omega, dtype=float)
    q = np.round(omega / (2 * np.pi))
    x = omega - 2 * np.pi * q
    sign = np.where((q * (n_antennas - 1)) % 2 == 0, 1.0, -1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = np.sin(omega * n_antennas / 2) / np.sin(omega / 2)
        reduced = sign * np.sin(x * n_antennas / 2) / np.sin(x / 2)
    ratio = np.where(np.abs(np.sin(omega / 2)) > 1e-6, direct, reduced)
    ratio = np.where(x == 0, sign * n_antennas, ratio)
    return np.exp(-1j * (n_antennas - 1) / 2 * omega) * ratio


def closed_form_element(link: LinkState, phase: complex, alphas, n: int, n_antennas: int,
                        spacing_ratio: float = 0.5) -> complex:
    """Row ``n`` (zero-based) of the angular response of a noise-free channel.

    Sums one Dirichlet-kernel term for the LoS path and one per scattering
    path; this is a test oracle for ``angular_response``, not the production path.
    """
    alphas = np.asarray(alphas)
    paths = len(link.nlos_angles)
    base = 2 * np.pi * n / n_antennas
    los_gain = np.sqrt(link.kappa * link.beta / (link.kappa + 1))
    nlos_gain = np.sqrt(link.beta / (paths * (link.kappa + 1)))
    los = los_gain * phase * _dirichlet(base + 2 * np.pi * spacing_ratio * np.cos(link.los_angle), n_antennas)
    omegas = base + 2 * np.pi * spacing_ratio * np.cos(np.asarray(link.nlos_angles))
    scatter = nlos_gain * np.sum(alphas * _dirichlet(omegas, n_antennas))
    return complex(los + scatter)


def angular_power(link: LinkState, n_antennas: int, tx_power: float, tau_p: int, noise_power: float,
                  realizations: int, rng, spacing_ratio: float = 0.5) -> np.ndarray:
    """Empirical ``E|F h_hat|^2`` over fresh fading and estimation noise draws."""
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    angles = np.broadcast_to(link.nlos_angles, (realizations, len(link.nlos_angles)))
    h, _, _ = draw_channels(link.beta, link.kappa, link.los_angle, angles, n_antennas, rng, spacing_ratio)
    h_hat = ls_estimate(h, tx_power, tau_p, noise_power, rng)
    return np.mean(np.abs(angular_response(h_hat)) ** 2, axis=0)


def angular_power_expected(link: LinkState, n_antennas: int, tx_power: float, tau_p: int,
                           noise_power: float, spacing_ratio: float = 0.5) -> np.ndarray:
    """Closed-form expectation of ``angular_power`` (independent paths, random LoS phase)."""
    paths = len(link.nlos_angles)
    los = np.abs(angular_response(steering_vector(link.los_angle, n_antennas, spacing_ratio))) ** 2
    nlos = np.abs(angular_response(steering_vector(np.asarray(link.nlos_angles), n_antennas,
                                                   spacing_ratio))) ** 2
    out = link.kappa * link.beta / (link.kappa + 1) * los
    out = out + link.beta / (paths * (link.kappa + 1)) * nlos.sum(axis=0)
    return out + n_antennas * noise_power / (tx_power * tau_p)


# --------------------------------------------------------------------------
# feature sets


@dataclass
class FeatureSet:
    """RSS vector (M,) and angular power matrix (N, M) for one UE or hypothesis."""

    rss: np.ndarray
    angular_power: np.ndarray
    source: str = "measured"
    position: tuple | None = None
    aps: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.source not in ("measured", "hypothesis"):
            raise ValueError("source must be 'measured' or 'hypothesis'")
        if self.source == "hypothesis" and self.position is None:
            raise ValueError("hypothesis features must carry their position")
        if self.angular_power.shape[1] != self.rss.shape[0]:
            raise ValueError("angular_power columns must match rss length")

    def to_dict(self) -> dict:
        return {
            "rss": self.rss.tolist(),
            "angular_power": self.angular_power.tolist(),
            "source": self.source,
            "position": None if self.position is None else list(self.position),
            "aps": None if self.aps is None else np.asarray(self.aps).tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureSet":
        return cls(
            rss=np.array(doc["rss"], dtype=float),
            angular_power=np.array(doc["angular_power"], dtype=float),
            source=doc["source"],
            position=None if doc["position"] is None else tuple(doc["position"]),
            aps=None if doc.get("aps") is None else np.array(doc["aps"], dtype=int),
        )


def feature_header(n_antennas: int, ap_count: int) -> list[str]:
    """CSV columns: x, y, rss_m{m}..., theta_n{n}_m{m}... (row-major over n, then m)."""
    cols = ["x", "y"] + [f"rss_m{m}" for m in range(ap_count)]
    cols += [f"theta_n{n}_m{m}" for n in range(n_antennas) for m in range(ap_count)]
    return cols


def feature_row(fs: FeatureSet) -> list[float]:
    x, y = fs.position if fs.position is not None else (float("nan"), float("nan"))
    return [x, y, *fs.rss.tolist(), *fs.angular_power.ravel(order="C").tolist()]


def write_features_csv(path, feature_sets) -> None:
    feature_sets = list(feature_sets)
    N, M = feature_sets[0].angular_power.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(feature_header(N, M))
        for fs in feature_sets:
            writer.writerow([repr(float(v)) for v in feature_row(fs)])


def read_features_csv(path, source: str = "hypothesis") -> list[FeatureSet]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        M = sum(1 for c in header if c.startswith("rss_"))
        N = (len(header) - 2 - M) // M
        out = []
        for row in reader:
            vals = np.array([float(v) for v in row])
            pos = None if np.isnan(vals[0]) else (vals[0], vals[1])
            out.append(FeatureSet(rss=vals[2:2 + M], angular_power=vals[2 + M:].reshape(N, M),
                                  source=source if pos is not None else "measured", position=pos))
    return out


def measured_feature_arrays(scenario: Scenario, cfg: FeatureConfig = FeatureConfig()):
    """Measured RSS (K, M) and angular power (K, N, M) for every UE.

    Each of the ``cfg.realizations`` draws is one coherence block with its own
    substream; the angular power averages ``|F h_hat|^2`` over those blocks.
    """
    cfg.validate()
    c = scenario.config
    p, tau, sigma2 = c.tx_power, c.tau_p, scenario.noise_power
    acc = np.zeros((scenario.M, scenario.K, scenario.N))
    first_h = None
    for b in range(cfg.realizations):
        rng = block_rng(c.seed, b)
        h, _, _ = draw_channels(scenario.beta, scenario.kappa, scenario.los_angle, scenario.nlos_angles,
                                scenario.N, rng, c.spacing_ratio)
        if first_h is None:
            first_h = h
        h_hat = ls_estimate(h, p, tau, sigma2, rng)
        acc += np.abs(angular_response(h_hat)) ** 2
    theta = acc / cfg.realizations
    if cfg.theta_mode == "expected":
        theta = np.array([[angular_power_expected(scenario.link(m, k), scenario.N, p, tau, sigma2,
                                                  c.spacing_ratio)
                           for k in range(scenario.K)] for m in range(scenario.M)])
    if cfg.rss_mode == "hardened":
        rss = rss_hardened(scenario.beta, scenario.N, p, tau)
    else:
        rss = rss_instant(first_h, p, tau)
    return np.asarray(rss).T.copy(), np.transpose(theta, (1, 2, 0)).copy()


def measured_features(scenario: Scenario, cfg: FeatureConfig = FeatureConfig()) -> list[FeatureSet]:
    rss, theta = measured_feature_arrays(scenario, cfg)
    return [FeatureSet(rss=rss[k], angular_power=theta[k], source="measured") for k in range(scenario.K)]


@functools.lru_cache(maxsize=512)
def _hypothesis_moments(seed: int, ap: int, realizations: int, paths: int, n_antennas: int) -> np.ndarray:
    """Sample second moments of the shared per-AP draws (LoS phase, path gains, noise).

    Every hypothesis at AP ``ap`` reuses the same draws, so comparisons across
    hypotheses are not blurred by independent Monte Carlo noise.
    """
    rng = np.random.default_rng([int(seed), TAG_HYPOTHESIS, int(ap), int(realizations)])
    phase = np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=(realizations, 1)))
    alpha = complex_normal(rng, (realizations, paths))
    noise = complex_normal(rng, (realizations, n_antennas))
    coef = np.concatenate([phase, alpha, noise], axis=1)
    moments = coef.conj().T @ coef / realizations
    moments.setflags(write=False)
    return moments


def _population_moments(paths: int, n_antennas: int) -> np.ndarray:
    return np.eye(1 + paths + n_antennas, dtype=complex)


def hypothesis_feature_arrays(scenario: Scenario, points, aps=None, cfg: FeatureConfig = FeatureConfig()):
    """Hypothesised RSS (P, M') and angular power (P, N, M') at ``points``.

    Geometry (distance, LoS angle) is recomputed at each point; scattering
    angles come from the position-frozen map. The Monte Carlo average over
    ``cfg.realizations`` draws is evaluated through its sample second-moment
    matrix, which equals averaging ``|F h_hat|^2`` over the draws.
    """
    cfg.validate()
    c = scenario.config
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(points < 0) or np.any(points > c.area_side):
        raise ValueError("hypothesis position outside the area")
    aps = np.arange(scenario.M) if aps is None else np.atleast_1d(np.asarray(aps, dtype=int))
    state = link_state_arrays(c, scenario.placement.ap_xy[aps], points, ap_indices=aps)
    N, L = scenario.N, c.paths_per_link
    p, tau, sigma2 = c.tx_power, c.tau_p, scenario.noise_power

    rss = rss_hardened(state["beta"], N, p, tau).T  # (P, M')

    kappa, beta = state["kappa"], state["beta"]
    los_gain = np.sqrt(kappa * beta / (kappa + 1))  # (M', P)
    nlos_gain = np.sqrt(beta / (L * (kappa + 1)))
    F = _dft(N)
    a_los = steering_vector(state["los_angle"], N, c.spacing_ratio) @ F.T  # (M', P, N)
    a_nlos = steering_vector(state["nlos_angles"], N, c.spacing_ratio) @ F.T  # (M', P, L, N)
    noise_basis = np.broadcast_to(F.T * np.sqrt(sigma2 / (p * tau)), (len(aps), len(points), N, N))
    basis = np.concatenate(
        [(los_gain[..., None] * a_los)[:, :, None, :], nlos_gain[..., None, None] * a_nlos, noise_basis],
        axis=2,
    )  # (M', P, J, N)

    theta = np.empty((len(aps), len(points), N))
    for i, m in enumerate(aps):
        if cfg.theta_mode == "expected":
            C = _population_moments(L, N)
        else:
            C = _hypothesis_moments(c.seed, int(m), cfg.realizations, L, N)
        B = basis[i]
        theta[i] = np.einsum("pjn,jk,pkn->pn", B.conj(), C, B, optimize=True).real
    np.maximum(theta, 0.0, out=theta)
    return rss, np.transpose(theta, (1, 2, 0))


def hypothesis_features(position, scenario: Scenario, aps=None, cfg: FeatureConfig = FeatureConfig()) -> FeatureSet:
    """Features the network would observe if a UE sat at ``position``."""
    rss, theta = hypothesis_feature_arrays(scenario, np.asarray(position, dtype=float)[None, :], aps, cfg)
    return FeatureSet(rss=rss[0], angular_power=theta[0], source="hypothesis",
                      position=tuple(float(v) for v in position), aps=None if aps is None else np.atleast_1d(aps))
