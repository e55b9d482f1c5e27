"""Joint positioning + correction training (two cooperating MADDPG networks)."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..estimate import cowknn_estimate, project, reference_grid, rmse
from ..features import FeatureConfig, hypothesis_feature_arrays, measured_feature_arrays, rss_hardened
from ..scenario import Scenario, draw_placement, link_state_arrays
from ..similarity import distance_dissimilarity, joint_similarity
from .agents import AgentGroup, Hyper

TAG_TRAIN = 53
DB_FLOOR = -200.0


# Training presets. ``pinned=True`` gives the literal pool sizes (64 / 512) with
# the plain Hyper defaults; the tuned presets use a pool large enough for the
# joint critic to fit, Adam, and the conventional soft-update direction.
TUNED_POSITIONING = dict(capacity=5000, batch_size=256, optimizer="adam", soft_convention="conventional",
                         lr_actor=3e-4, lr_critic=1e-3)
TUNED_CORRECTION = dict(capacity=5000, batch_size=128, optimizer="adam", soft_convention="conventional",
                        lr_actor=1e-5, lr_critic=1e-4)


def positioning_hyper(pinned: bool = False, **kw) -> Hyper:
    base = {"capacity": 64} if pinned else TUNED_POSITIONING
    return Hyper(**{**base, **kw})


def correction_hyper(pinned: bool = False, **kw) -> Hyper:
    base = {"capacity": 512} if pinned else TUNED_CORRECTION
    return Hyper(**{**base, **kw})


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    steps_per_episode: int = 10
    positioning: Hyper = field(default_factory=positioning_hyper)
    correction: Hyper = field(default_factory=correction_hyper)
    delta_max: float = np.pi / 18  # a saturated correction stays a small rotation
    d_max: float | None = None  # None: area diagonal
    resample_ues: bool = False
    correction_transform: str = "log"  # "log" or "none"; applied to critic targets only
    rss_domain: str = "db"  # "linear" or "db": scale on which RSS vectors are compared
    reward_norm: str = "area"  # "area": per-UE max over the area; "set": max over the evaluated UEs
    feature: FeatureConfig = FeatureConfig()
    seed: int = 0


def position_from_action(ap_xy, d_hat, theta_hat, delta=0.0, area_side=None, wrap: bool = False):
    """Projected point of an AP's action; clamped to the area, or wrapped on a torus."""
    if np.any(np.asarray(d_hat) < 0):
        raise ValueError("d_hat must be non-negative")
    return project(ap_xy, d_hat, theta_hat, delta, area_side, wrap)


# --------------------------------------------------------------------------
# rewards


def reward_positioning(measured_rss, hyp_rss, subset=None, scale=None) -> float:
    """Negated sum of per-UE RSS dissimilarities.

    ``measured_rss`` and ``hyp_rss`` are (K', M) for the agent's evaluated UEs.
    Each term is divided by the largest of them unless a fixed per-UE
    ``scale`` is given.
    """
    measured_rss = np.atleast_2d(measured_rss)
    hyp_rss = np.atleast_2d(hyp_rss)
    if len(measured_rss) == 0:
        raise ValueError("evaluated UE set must be nonempty")
    raw = np.array([distance_dissimilarity(a, h, subset) for a, h in zip(measured_rss, hyp_rss)])
    if scale is not None:
        return float(-np.sum(raw / np.asarray(scale, dtype=float)))
    top = raw.max()
    if not top > 0:
        warnings.warn("all RSS dissimilarities are zero; positioning reward set to 0", RuntimeWarning)
        return 0.0
    return float(-np.sum(raw / top))


def _cosines(theta_a, theta_h):
    num = np.sum(theta_a * theta_h, axis=-2)
    den = np.linalg.norm(theta_a, axis=-2) * np.linalg.norm(theta_h, axis=-2)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.clip(np.where(den > 0, num / den, 0.0), 0.0, 1.0)


def joint_terms(measured_rss, measured_theta, hyp_rss, hyp_theta, subset=None, axis=0, scale=None):
    """Joint coefficients of several hypotheses, distances normalised over ``axis``.

    RSS arrays are (..., M) and angular power (..., N, M). A fixed ``scale``
    (broadcasting against the distances) replaces the max over ``axis``.
    """
    M = np.shape(measured_rss)[-1]
    subset = np.arange(M) if subset is None else np.asarray(subset, dtype=int)
    raw = np.linalg.norm((np.asarray(measured_rss) - np.asarray(hyp_rss))[..., subset], axis=-1)
    top = np.max(raw, axis=axis, keepdims=True) if scale is None else np.broadcast_to(scale, raw.shape)
    dn = np.divide(raw, top, out=np.zeros_like(raw), where=top > 0)
    angle = _cosines(np.asarray(measured_theta)[..., subset], np.asarray(hyp_theta)[..., subset]).mean(axis=-1)
    return joint_similarity(np.clip(dn, 0.0, 1.0), angle)


def reward_correction(measured_rss, measured_theta, hyp_rss, hyp_theta, subset=None, scale=None) -> float:
    """Sum of joint coefficients over the agent's evaluated UEs (first axis)."""
    if np.size(measured_rss) == 0:
        return 0.0
    return float(np.sum(joint_terms(measured_rss, measured_theta, hyp_rss, hyp_theta, subset, axis=0,
                                    scale=scale)))


# --------------------------------------------------------------------------
# environment


class JpcEnv:
    """Maps normalised actions to positions and scores them against measured features."""

    def __init__(self, scenario: Scenario, cfg: TrainConfig):
        self.cfg = cfg
        self.side = scenario.config.area_side
        self.d_max = cfg.d_max if cfg.d_max is not None else float(np.sqrt(2.0) * self.side)
        self.set_scenario(scenario)
        c = scenario.config
        # RSS normalisation: 0 at the strongest possible link, about -1 per 30 dB
        self.rss_ref = 10 * np.log10(scenario.N * c.tx_power * c.tau_p * 10 ** (-c.pathloss_offset / 10)
                                     * 10 ** (-15 * np.log10(c.pathloss_d1 / 1000) / 10)
                                     * 10 ** (-20 * np.log10(c.pathloss_d0 / 1000) / 10))

    def set_scenario(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.rss, self.theta = measured_feature_arrays(scenario, self.cfg.feature)  # (K, M), (K, N, M)
        self.rss_cmp = self.compare_scale(self.rss)
        self.scale = self.area_scale() if self.cfg.reward_norm == "area" else None

    def area_scale(self, spacing: float = 2.5) -> np.ndarray:
        """Largest RSS dissimilarity of each UE over a reference grid plus the AP sites: (K,)."""
        pts = np.concatenate([reference_grid(self.side, spacing), self.scenario.placement.ap_xy])
        hyp = self.hypothesis_rss(pts[None])[0]  # (P, M)
        raw = np.linalg.norm(hyp[None, :, :] - self.rss_cmp[:, None, :], axis=2)
        return raw.max(axis=1)

    @property
    def M(self) -> int:
        return self.scenario.M

    @property
    def K(self) -> int:
        return self.scenario.K

    def positioning_states(self) -> np.ndarray:
        db = 10 * np.log10(np.maximum(self.rss.T, 10 ** (DB_FLOOR / 10)))  # (M, K)
        return (db - self.rss_ref) / 30.0

    def decode_positioning(self, u):
        """(M, 2K) normalised -> distances and angles, each (M, K)."""
        K = self.K
        d = (u[:, :K] + 1.0) / 2.0 * self.d_max
        theta = np.mod((u[:, K:] + 1.0) * np.pi, 2 * np.pi)
        return d, theta

    def correction_states(self, theta) -> np.ndarray:
        return theta / np.pi - 1.0

    def decode_correction(self, u):
        return u * self.cfg.delta_max

    def positions(self, d, theta, delta=0.0):
        """(M, K, 2) hypothesised positions."""
        return position_from_action(self.scenario.placement.ap_xy[:, None, :], d, theta, delta, self.side,
                                    self.scenario.config.wrap_around)

    def compare_scale(self, rss):
        if self.cfg.rss_domain == "db":
            return 10 * np.log10(np.maximum(rss, 10 ** (DB_FLOOR / 10)))
        return np.asarray(rss, dtype=float)

    def hypothesis(self, pos):
        """Features at (M, K, 2) positions: rss (M, K, M) on the comparison scale, theta (M, K, N, M)."""
        M, K = pos.shape[:2]
        rss, theta = hypothesis_feature_arrays(self.scenario, pos.reshape(-1, 2), cfg=self.cfg.feature)
        return self.compare_scale(rss).reshape(M, K, -1), theta.reshape(M, K, *theta.shape[1:])

    def hypothesis_rss(self, pos):
        """Hardened RSS (comparison scale) at (A, B, 2) positions: (A, B, M)."""
        c = self.scenario.config
        state = link_state_arrays(c, self.scenario.placement.ap_xy, pos.reshape(-1, 2), angles=False)
        rss = rss_hardened(state["beta"].T, self.scenario.N, c.tx_power, c.tau_p)
        return self.compare_scale(rss).reshape(pos.shape[0], pos.shape[1], -1)

    def rewards_positioning(self, pos) -> np.ndarray:
        hyp = self.hypothesis_rss(pos)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.array([reward_positioning(self.rss_cmp, hyp[m], scale=self.scale) for m in range(self.M)])

    def joint_matrix(self, pos, normalise_over: str = "ues"):
        """(M, K) joint coefficients.

        Distances are normalised by the per-UE area scale when configured,
        otherwise over the agent's UEs (``ues``) or over the agents (``agents``).
        """
        rss, theta = self.hypothesis(pos)
        axis = 1 if normalise_over == "ues" else 0
        scale = None if self.scale is None else self.scale[None, :]
        return joint_terms(self.rss_cmp[None], self.theta[None], rss, theta, axis=axis, scale=scale)

    def rewards_correction(self, pos) -> np.ndarray:
        return self.joint_matrix(pos, "ues").sum(axis=1)

    def estimate(self, d, theta, delta):
        """Co-WKNN fusion of every agent's corrected projection; (K, 2)."""
        pos = self.positions(d, theta, delta)
        coeff = self.joint_matrix(pos, "agents")
        wrap = self.scenario.config.wrap_around
        out = np.empty((self.K, 2))
        for k in range(self.K):
            est = cowknn_estimate(d[:, k], theta[:, k], delta[:, k], self.scenario.placement.ap_xy,
                                  coeff[:, k], area_side=self.side, wrap=wrap, ue_index=k)
            out[k] = est.xy_hat
        return out

    def rmse(self, xy_hat) -> float:
        side = self.side if self.scenario.config.wrap_around else None
        return rmse(self.scenario.placement.ue_xy, xy_hat, side)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    episode: list = field(default_factory=list)
    reward_positioning: list = field(default_factory=list)
    reward_correction: list = field(default_factory=list)
    eval_rmse: list = field(default_factory=list)

    def append(self, ep, rp, rc, err) -> None:
        self.episode.append(int(ep))
        self.reward_positioning.append(float(rp))
        self.reward_correction.append(float(rc))
        self.eval_rmse.append(float(err))

    def rows(self) -> list[list]:
        return [list(r) for r in zip(self.episode, self.reward_positioning, self.reward_correction, self.eval_rmse)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "reward_positioning", "reward_correction", "eval_rmse"])
            for r in self.rows():
                writer.writerow([r[0]] + [repr(float(v)) for v in r[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                log.append(int(row[0]), float(row[1]), float(row[2]), float(row[3]))
        return log


@dataclass
class JpcResult:
    positioning: AgentGroup
    correction: AgentGroup
    log: TrainingLog
    env: JpcEnv

    def greedy_actions(self):
        env = self.env
        up = self.positioning.act(env.positioning_states())
        d, theta = env.decode_positioning(up)
        uc = self.correction.act(env.correction_states(theta))
        return d, theta, env.decode_correction(uc)

    def estimate(self):
        return self.env.estimate(*self.greedy_actions())

    def rmse(self) -> float:
        return self.env.rmse(self.estimate())


def _transform(r, how: str):
    if how == "log":
        return np.sign(r) * np.log10(1.0 + np.abs(r))
    return r


def train_jpc(scenario: Scenario, cfg: TrainConfig = TrainConfig(), progress=None) -> JpcResult:
    """Train both networks; fully determined by ``cfg.seed`` and the scenario."""
    rng = np.random.default_rng([int(cfg.seed), TAG_TRAIN])
    env = JpcEnv(scenario, cfg)
    M, K = env.M, env.K
    pos_group = AgentGroup(M, K, 2 * K, cfg.positioning, rng)
    cor_group = AgentGroup(M, K, K, cfg.correction, rng)
    log = TrainingLog()
    total = max(cfg.episodes * cfg.steps_per_episode - 1, 1)
    base_config = scenario.config

    t = 0
    for ep in range(cfg.episodes):
        if cfg.resample_ues and ep > 0:
            placement = draw_placement(base_config.replace(seed=int(rng.integers(2**31))))
            env.set_scenario(scenario.with_ue_positions(placement.ue_xy))
        sp = env.positioning_states()
        rp_sum = rc_sum = 0.0
        pending = None  # correction transition waiting for its next state
        for step in range(cfg.steps_per_episode):
            frac = t / total
            sig_p = 2.0 * (cfg.positioning.noise_start + frac * (cfg.positioning.noise_end - cfg.positioning.noise_start))
            sig_c = 2.0 * (cfg.correction.noise_start + frac * (cfg.correction.noise_end - cfg.correction.noise_start))
            up = pos_group.act(sp, True, sig_p, rng)
            d, theta = env.decode_positioning(up)
            sc = env.correction_states(theta)
            if pending is not None:
                cor_group.buffer.add(s2=sc, **pending)
            uc = cor_group.act(sc, True, sig_c, rng)
            delta = env.decode_correction(uc)

            rp = env.rewards_positioning(env.positions(d, theta))
            rc = env.rewards_correction(env.positions(d, theta, delta))
            rp_sum += rp.mean()
            rc_sum += rc.mean()

            pos_group.buffer.add(s=sp, a=up, r=cfg.positioning.reward_scale * rp, s2=sp)
            pending = {"s": sc, "a": uc, "r": cfg.correction.reward_scale * _transform(rc, cfg.correction_transform)}
            if step == cfg.steps_per_episode - 1:
                cor_group.buffer.add(s2=sc, **pending)
                pending = None

            for group in (pos_group, cor_group):
                if len(group.buffer) >= group.hyper.batch_size:
                    group.update(rng)
            if not (pos_group.is_finite() and cor_group.is_finite()):
                raise FloatingPointError(f"non-finite parameters at episode {ep}, step {step}")
            t += 1

        result = JpcResult(pos_group, cor_group, log, env)
        err = result.rmse()
        log.append(ep, rp_sum / cfg.steps_per_episode, rc_sum / cfg.steps_per_episode, err)
        if progress is not None:
            progress(ep, log)
    if cfg.resample_ues:
        env.set_scenario(scenario)
    return JpcResult(pos_group, cor_group, log, env)


def random_action_rmse(scenario: Scenario, draws: int = 20, seed: int = 0, cfg: TrainConfig = TrainConfig()) -> float:
    """Mean RMSE of uniformly random actions pushed through the same Co-WKNN pipeline."""
    env = JpcEnv(scenario, cfg)
    rng = np.random.default_rng([int(seed), TAG_TRAIN, 1])
    out = []
    for _ in range(draws):
        d, theta = env.decode_positioning(rng.uniform(-1, 1, size=(env.M, 2 * env.K)))
        delta = env.decode_correction(rng.uniform(-1, 1, size=(env.M, env.K)))
        out.append(env.rmse(env.estimate(d, theta, delta)))
    return float(np.mean(out))


def smoothed(values, window: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
