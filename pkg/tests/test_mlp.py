from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellfree_loc.marl.agents import actor_gradient
from cellfree_loc.marl.mlp import Adam, Mlp, mlp_forward, mlp_gradient, soft_update


def fd_check(f, params, grads, step=1e-5):
    """Largest relative error between analytic grads and central differences of scalar f."""
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = f()
            flat[i] = old - step
            down = f()
            flat[i] = old
            num = (up - down) / (2 * step)
            worst = max(worst, abs(num - gflat[i]) / max(1.0, abs(num), abs(gflat[i])))
    return worst


def random_net(rng, output="tanh", stack=()):
    sizes = [int(rng.integers(1, 5)) for _ in range(4)]
    net = Mlp(sizes, output, rng=rng, stack=stack, final_scale=1.0)
    for b in net.biases:
        b[...] = rng.normal(size=b.shape)
    return net


def test_zero_network_outputs_zero():
    net = Mlp([3, 4, 2], "identity")
    net.set_params([np.zeros_like(p) for p in net.params])
    np.testing.assert_array_equal(net(np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_single_linear_layer(rng):
    net = Mlp([3, 2], "identity", rng=rng)
    x = rng.normal(size=3)
    W, b = net.weights[0], net.biases[0]
    b[...] = rng.normal(size=2)
    out, _ = mlp_forward(net, x)
    np.testing.assert_allclose(out, x @ W + b)
    grads, dx = mlp_gradient(net, x, np.ones(2))
    np.testing.assert_allclose(grads[0], np.outer(x, np.ones(2)))
    np.testing.assert_allclose(grads[1], np.ones(2))
    np.testing.assert_allclose(dx, W @ np.ones(2))


def test_leaky_slope():
    net = Mlp([1, 1, 1], "identity")
    net.set_params([np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1)])
    assert net(np.array([-1.0]))[0] == pytest.approx(-0.01)
    assert net(np.array([2.0]))[0] == pytest.approx(2.0)


def test_zero_upstream_zero_gradients(rng):
    net = random_net(rng)
    x = rng.normal(size=(5, net.sizes[0]))
    grads, dx = mlp_gradient(net, x, np.zeros((5, net.sizes[-1])))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_shape_mismatch_rejected(rng):
    net = Mlp([3, 4, 2])
    with pytest.raises(ValueError):
        net(np.ones(4))
    _, cache = net.forward(np.ones((2, 3)))
    with pytest.raises(ValueError):
        net.backward(cache, np.ones((2, 3)))


def gradient_errors(n_nets=20, seed=0):
    """Worst finite-difference mismatch over actor, critic and the composed path."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nets):
        for output in ("tanh", "identity"):
            net = random_net(rng, output)
            x = rng.normal(size=(3, net.sizes[0]))
            up = rng.normal(size=(3, net.sizes[-1]))
            grads, dx = mlp_gradient(net, x, up)
            worst = max(worst, fd_check(lambda: float(np.sum(net(x) * up)), net.params, grads))
            worst = max(worst, fd_check(lambda: float(np.sum(net(x) * up)), [x], [dx]))
        # actor through critic: objective -mean Q with the actor's block swapped in
        s_dim, a_dim, others = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        actor = Mlp([s_dim, 5, 4, a_dim], "tanh", rng=rng, final_scale=1.0)
        D = s_dim + a_dim + others
        critic = Mlp([D, 6, 3, 1], "identity", rng=rng, final_scale=1.0)
        states = rng.normal(size=(4, s_dim))
        joint = rng.normal(size=(4, D))
        off = int(rng.integers(0, D - a_dim + 1))

        def objective():
            x = joint.copy()
            x[:, off:off + a_dim] = actor(states)
            return -float(np.mean(critic(x)))

        _, grads = actor_gradient(actor, critic, states, joint, off)
        worst = max(worst, fd_check(objective, actor.params, grads))
    return worst


def test_gradients_match_finite_differences():
    assert gradient_errors(5, seed=1) <= 1e-4


def test_stacked_matches_individual(rng):
    net = Mlp([3, 5, 2], "tanh", rng=rng, stack=(4,), final_scale=1.0)
    x = rng.normal(size=(4, 6, 3))
    up = rng.normal(size=(4, 6, 2))
    out, cache = net.forward(x)
    grads, dx = net.backward(cache, up)
    for m in range(4):
        one = net.view(m)
        o, c = one.forward(x[m])
        g, d = one.backward(c, up[m])
        np.testing.assert_allclose(o, out[m])
        np.testing.assert_allclose(d, dx[m])
        for a, b in zip(g, grads):
            np.testing.assert_allclose(a, b[m])


def test_soft_update_examples():
    def scalar_net(v):
        net = Mlp([1, 1], "identity")
        net.set_params([np.full((1, 1), v), np.full(1, v)])
        return net

    t = scalar_net(0.0)
    soft_update(t, scalar_net(10.0), 0.99)
    assert t.weights[0][0, 0] == pytest.approx(0.1)
    t = scalar_net(3.0)
    soft_update(t, scalar_net(10.0), 0.0)
    assert t.weights[0][0, 0] == 10.0
    t = scalar_net(3.0)
    soft_update(t, scalar_net(10.0), 1.0)
    assert t.weights[0][0, 0] == 3.0
    t = scalar_net(0.0)
    soft_update(t, scalar_net(10.0), 0.01, convention="conventional")
    assert t.weights[0][0, 0] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        soft_update(t, Mlp([2, 1]), 0.5)


@given(st.floats(0, 1), st.integers(0, 2**31))
def test_soft_update_convex(tau, seed):
    rng = np.random.default_rng(seed)
    a, b = Mlp([3, 4, 2], rng=rng, final_scale=1.0), Mlp([3, 4, 2], rng=rng, final_scale=1.0)
    before = [p.copy() for p in a.params]
    soft_update(a, b, tau)
    for new, old, cur in zip(a.params, before, b.params):
        assert np.all(new >= np.minimum(old, cur) - 1e-12) and np.all(new <= np.maximum(old, cur) + 1e-12)


def test_text_round_trip(rng):
    net = Mlp([4, 128, 64, 3], "tanh", rng=rng, stack=(2,))
    back = Mlp.from_text(net.to_text())
    assert back.sizes == net.sizes and back.stack == net.stack and back.output == "tanh"
    for p, q in zip(net.params, back.params):
        np.testing.assert_array_equal(p, q)
    with pytest.raises(ValueError):
        Mlp.from_text("garbage\n")


def test_adam_minimises_quadratic():
    p = np.array([3.0, -2.0])
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step([p], [2 * p])
    np.testing.assert_allclose(p, 0.0, atol=1e-3)
