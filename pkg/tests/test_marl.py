from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellfree_loc.marl.agents import (
    AgentBundle, AgentGroup, Hyper, ReplayBuffer, actor_act, actor_gradient, critic_eval, critic_step,
    update_actor, update_critic,
)
from cellfree_loc.marl.jpc import (
    JpcEnv, TrainConfig, TrainingLog, position_from_action, positioning_hyper, correction_hyper,
    random_action_rmse, reward_correction, reward_positioning, smoothed, train_jpc,
)
from cellfree_loc.marl.mlp import Adam, Mlp
from cellfree_loc.similarity import J_MAX


def bundle(state_dim=3, action_dim=2, hyper=Hyper(), seed=0):
    rng = np.random.default_rng(seed)
    actor = Mlp((state_dim, 128, 64, action_dim), "tanh", rng=rng)
    critic = Mlp((state_dim + action_dim, 128, 64, 1), "identity", rng=rng)
    return AgentBundle(actor, critic, actor.copy(), critic.copy(), hyper)


def bellman_regression_steps(seed=0, max_steps=5000, tol=1e-3):
    """Critic updates on one fixed transition with gamma 0 until |Q - r| < tol; None if never."""
    rng = np.random.default_rng(seed)
    b = bundle(hyper=Hyper(gamma=0.0), seed=seed)
    s, a, r = rng.normal(size=(1, 3)), rng.uniform(-1, 1, size=(1, 2)), np.array([rng.normal()])
    batch = {"s": s, "a": a, "r": r, "s2": rng.normal(size=(1, 3))}
    for step in range(1, max_steps + 1):
        update_critic(b, batch, np.zeros((1, 2)))
        if abs(critic_eval(b.critic, s, a)[0] - r[0]) < tol:
            return step
    return None


# -- critic ---------------------------------------------------------------


def test_critic_zero_weights_returns_bias():
    critic = Mlp((4, 8, 1), "identity")
    critic.set_params([np.zeros((4, 8)), np.zeros(8), np.zeros((8, 1)), np.full(1, 2.5)])
    assert critic_eval(critic, np.ones((3, 2)), np.ones((3, 2))).tolist() == [2.5] * 3


def test_critic_sees_other_agents_actions(rng):
    critic = Mlp((6, 16, 1), "identity", rng=rng, final_scale=1.0)
    s = rng.normal(size=2)
    a = np.array([0.1, 0.9, -0.5, 0.3])
    swapped = np.array([0.1, 0.9, 0.3, -0.5])
    assert critic_eval(critic, s, a) != critic_eval(critic, s, swapped)


def test_critic_loss_hand_example():
    critic = Mlp((1, 1), "identity")
    critic.set_params([np.ones((1, 1)), np.zeros(1)])
    loss, grads = critic_step(critic, np.array([[1.0], [2.0]]), np.array([0.0, 0.0]))
    assert loss == pytest.approx(2.5)
    assert grads[0][0, 0] == pytest.approx(5.0)  # mean of 2 * q * x
    assert grads[1][0] == pytest.approx(3.0)


def test_pretrained_critic_has_zero_loss():
    b = bundle(hyper=Hyper(gamma=0.0))
    s, a = np.ones((4, 3)), np.zeros((4, 2))
    q = critic_eval(b.critic, s, a)
    batch = {"s": s, "a": a, "r": q, "s2": s}
    assert update_critic(b, batch, a) == pytest.approx(0.0, abs=1e-20)


def test_bellman_regression_converges():
    steps = bellman_regression_steps(0)
    assert steps is not None and steps <= 5000


def test_empty_batch_rejected():
    b = bundle()
    with pytest.raises(ValueError):
        update_critic(b, {"s": np.zeros((0, 3)), "a": np.zeros((0, 2)), "r": np.zeros(0),
                          "s2": np.zeros((0, 3))}, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        update_actor(b, np.zeros((0, 3)), np.zeros((0, 5)), 3)


def test_critic_stays_finite_over_long_training(rng):
    b = bundle(hyper=Hyper(gamma=0.9))
    for _ in range(10_000):
        s = rng.normal(size=(8, 3))
        batch = {"s": s, "a": rng.uniform(-1, 1, size=(8, 2)), "r": rng.uniform(-1, 1, size=8), "s2": s}
        update_critic(b, batch, rng.uniform(-1, 1, size=(8, 2)))
    assert b.critic.is_finite()


# -- actor ----------------------------------------------------------------


class QuadraticCritic:
    """Q(s, a) = -|a - target|^2 on the action block of its input; duck-types the network API."""

    def __init__(self, target, offset):
        self.target, self.offset = np.asarray(target, dtype=float), offset

    def forward(self, x):
        a = x[..., self.offset:self.offset + self.target.size]
        return -np.sum((a - self.target) ** 2, axis=-1, keepdims=True), x

    def backward(self, x, upstream):
        dx = np.zeros_like(x)
        a = x[..., self.offset:self.offset + self.target.size]
        dx[..., self.offset:self.offset + self.target.size] = upstream * -2.0 * (a - self.target)
        return [], dx


def test_actor_moves_toward_critic_optimum(rng):
    actor = Mlp((2, 16, 2), "tanh", rng=rng)
    critic = QuadraticCritic([0.4, -0.3], offset=2)
    states = rng.normal(size=(16, 2))
    opt = Adam(1e-2)
    joint = np.zeros((16, 4))
    for _ in range(1500):
        _, grads = actor_gradient(actor, critic, states, joint, 2)
        opt.step(actor.params, grads)
    np.testing.assert_allclose(actor(states), np.broadcast_to([0.4, -0.3], (16, 2)), atol=1e-2)


def test_flat_critic_gives_zero_actor_gradient(rng):
    actor = Mlp((2, 8, 1), "tanh", rng=rng)
    critic = Mlp((3, 8, 1), "identity")
    critic.set_params([np.zeros_like(p) for p in critic.params])
    _, grads = actor_gradient(actor, critic, rng.normal(size=(4, 2)), np.zeros((4, 3)), 2)
    assert all(np.all(g == 0) for g in grads)


@given(st.integers(0, 2**31), st.floats(0, 1))
def test_actions_in_bounds(seed, sigma):
    rng = np.random.default_rng(seed)
    actor = Mlp((3, 8, 2), "tanh", rng=rng, final_scale=5.0)
    a = actor_act(actor, rng.normal(scale=10, size=(5, 3)), explore=True, sigma=sigma, rng=rng)
    assert np.all(np.abs(a) <= 1.0)


def test_exploration_noise_is_bounded_and_seeded(rng):
    actor = Mlp((3, 8, 2), "tanh", rng=rng)
    s = rng.normal(size=(200, 3))
    clean = actor_act(actor, s)
    noisy = actor_act(actor, s, True, 0.05, np.random.default_rng(1))
    assert np.all(np.abs(noisy - clean) <= 0.1 + 1e-12)
    np.testing.assert_array_equal(noisy, actor_act(actor, s, True, 0.05, np.random.default_rng(1)))
    np.testing.assert_array_equal(clean, actor_act(actor, s, True, 0.0, rng))


# -- replay buffer --------------------------------------------------------


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(3, {"r": ()})
    for v in range(5):
        buf.add(r=v)
    assert len(buf) == 3
    assert sorted(buf.data["r"].tolist()) == [2.0, 3.0, 4.0]
    assert buf.data["r"][buf.oldest_first()].tolist() == [2.0, 3.0, 4.0]


def test_buffer_sampling():
    buf = ReplayBuffer(10, {"r": ()})
    with pytest.raises(ValueError):
        buf.sample(1, np.random.default_rng(0))
    for v in range(6):
        buf.add(r=v)
    draw = buf.sample(6, np.random.default_rng(0))["r"]
    assert sorted(draw.tolist()) == list(map(float, range(6)))
    with pytest.raises(ValueError):
        buf.sample(7, np.random.default_rng(0))
    a = buf.sample(4, np.random.default_rng(5))["r"]
    np.testing.assert_array_equal(a, buf.sample(4, np.random.default_rng(5))["r"])


def test_hyper_validation():
    with pytest.raises(ValueError):
        Hyper(gamma=1.0).validate()
    with pytest.raises(ValueError):
        Hyper(batch_size=65, capacity=64).validate()
    with pytest.raises(ValueError):
        Hyper(tau=0.0).validate()


def test_hyper_presets():
    p, c = positioning_hyper(pinned=True), correction_hyper(pinned=True)
    assert (p.capacity, c.capacity) == (64, 512)
    assert p.gamma == c.gamma == 0.99 and p.tau == c.tau == 0.01
    assert (p.batch_size, p.optimizer, p.soft_convention) == (32, "sgd", "printed")
    tuned = positioning_hyper(batch_size=16)
    assert tuned.batch_size == 16 and tuned.capacity >= 1000 and tuned.soft_convention == "conventional"
    assert correction_hyper().gamma == 0.99


# -- agent group ----------------------------------------------------------


def test_group_update_is_seeded_and_finite():
    def run():
        rng = np.random.default_rng(4)
        g = AgentGroup(3, 2, 2, Hyper(batch_size=4, capacity=8, optimizer="adam"), rng)
        for _ in range(10):
            s = rng.normal(size=(3, 2))
            g.buffer.add(s=s, a=g.act(s, True, 0.1, rng), r=rng.normal(size=3), s2=s)
        out = [g.update(rng) for _ in range(5)]
        return g, out

    g1, o1 = run()
    g2, o2 = run()
    assert g1.is_finite()
    for p, q in zip(g1.actor.params + g1.critic.params, g2.actor.params + g2.critic.params):
        np.testing.assert_array_equal(p, q)
    np.testing.assert_array_equal(o1[-1][0], o2[-1][0])


def test_group_views_share_memory():
    g = AgentGroup(2, 2, 1, Hyper(), np.random.default_rng(0))
    view = g.agent(1)
    view.actor.weights[0][...] = 0.0
    assert np.all(g.actor.weights[0][1] == 0) and not np.all(g.actor.weights[0][0] == 0)


# -- rewards and projection -----------------------------------------------


def test_position_from_action_examples():
    ap = np.array([10.0, 20.0])
    np.testing.assert_allclose(position_from_action(ap, 5.0, 0.0), [15.0, 20.0])
    np.testing.assert_allclose(position_from_action(ap, 5.0, np.pi / 2), [10.0, 25.0], atol=1e-12)
    np.testing.assert_allclose(position_from_action(ap, 5.0, 0.0, np.pi / 2), [10.0, 25.0], atol=1e-12)
    np.testing.assert_allclose(position_from_action(ap, 0.0, 1.3), ap)
    np.testing.assert_allclose(position_from_action(ap, 200.0, np.pi, area_side=100.0), [0.0, 20.0])
    np.testing.assert_allclose(position_from_action(ap, 95.0, 0.0, area_side=100.0, wrap=True), [5.0, 20.0])
    with pytest.raises(ValueError):
        position_from_action(ap, -1.0, 0.0)


def test_reward_positioning_examples():
    meas = np.array([[1.0, 2.0], [3.0, 4.0]])
    with pytest.warns(RuntimeWarning):
        assert reward_positioning(meas, meas) == 0.0
    assert reward_positioning(meas[:1], meas[:1] + 1.0) == pytest.approx(-1.0)
    hyp = meas.copy()
    hyp[1] += [3.0, 4.0]
    assert reward_positioning(meas, hyp) == pytest.approx(-1.0)
    hyp[0] += [0.6, 0.8]
    assert reward_positioning(meas, hyp) == pytest.approx(-1.2)
    assert reward_positioning(meas, hyp, scale=[1.0, 10.0]) == pytest.approx(-1.5)
    with pytest.raises(ValueError):
        reward_positioning(np.zeros((0, 2)), np.zeros((0, 2)))


@given(st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_reward_positioning_monotone_with_fixed_scale(a, b):
    meas = np.zeros((2, 3))
    near, far = meas.copy(), meas.copy()
    near[0, 0], far[0, 0] = min(a, b), max(a, b)
    assert reward_positioning(meas, near, scale=[10, 10]) >= reward_positioning(meas, far, scale=[10, 10])


def test_reward_correction_examples(rng):
    rss = rng.uniform(1, 2, size=(2, 4))
    theta = rng.uniform(0.1, 1, size=(2, 3, 4))
    assert reward_correction(rss, theta, rss, theta) == pytest.approx(2 * J_MAX)
    assert reward_correction(np.zeros((0, 4)), np.zeros((0, 3, 4)), np.zeros((0, 4)), np.zeros((0, 3, 4))) == 0.0
    off = reward_correction(rss, theta, rss + 0.1, theta[:, ::-1])
    assert off < 2 * J_MAX


# -- training loop --------------------------------------------------------


def small_cfg(seed=0, episodes=3):
    hk = dict(batch_size=4, optimizer="adam", soft_convention="conventional")
    return TrainConfig(episodes=episodes, steps_per_episode=4, seed=seed, positioning=positioning_hyper(**hk),
                       correction=correction_hyper(**hk))


@pytest.fixture(scope="module")
def tiny():
    from cellfree_loc.scenario import ScenarioConfig, build_scenario
    return build_scenario(ScenarioConfig(ap_count=4, ue_count=2, antennas_per_ap=4, seed=1))


def test_training_is_deterministic(tiny):
    a = train_jpc(tiny, small_cfg())
    b = train_jpc(tiny, small_cfg())
    assert a.log.rows() == b.log.rows()
    np.testing.assert_array_equal(a.estimate(), b.estimate())
    assert a.positioning.actor.to_text() == b.positioning.actor.to_text()
    c = train_jpc(tiny, small_cfg(seed=1))
    assert c.log.rows() != a.log.rows()


def test_training_log_round_trip(tiny, tmp_path):
    res = train_jpc(tiny, small_cfg())
    assert len(res.log.episode) == 3
    res.log.write_csv(tmp_path / "log.csv")
    back = TrainingLog.read_csv(tmp_path / "log.csv")
    assert back.rows() == res.log.rows()


def test_training_aborts_on_non_finite(tiny):
    hk = dict(batch_size=4, lr_critic=1e300, lr_actor=1e300)
    cfg = TrainConfig(episodes=5, steps_per_episode=4, positioning=positioning_hyper(**hk),
                      correction=correction_hyper(**hk))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(FloatingPointError):
            train_jpc(tiny, cfg)


def test_env_decoding_ranges(tiny):
    env = JpcEnv(tiny, small_cfg())
    d, theta = env.decode_positioning(np.array([[-1.0, 1.0, -1.0, 1.0]] * 4))
    assert np.all(d[:, 0] == 0) and np.all(d[:, 1] == env.d_max)
    assert np.all((theta >= 0) & (theta < 2 * np.pi))
    assert np.all(np.abs(env.decode_correction(np.ones((4, 2)))) == env.cfg.delta_max)


def test_random_baseline_positive(tiny):
    assert random_action_rmse(tiny, draws=3, cfg=small_cfg()) > 0


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    np.testing.assert_allclose(smoothed([1, 2], 10), [1.5])
