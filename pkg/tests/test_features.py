from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cellfree_loc.channel import draw_channels, steering_vector
from cellfree_loc.features import (
    FeatureConfig, FeatureSet, PilotBook, _dirichlet, angular_power, angular_power_expected, angular_response,
    closed_form_element, despread, dft_matrix, hypothesis_feature_arrays, hypothesis_features,
    ls_estimate, measured_feature_arrays, measured_features, read_features_csv, receive_pilots,
    rss_hardened, rss_instant, write_features_csv,
)
from cellfree_loc.scenario import LinkState


def random_link(rng, kappa=None, paths=6):
    return LinkState(
        beta=float(10 ** rng.uniform(-11, -8)),
        kappa=float(rng.uniform(0, 15)) if kappa is None else kappa,
        los_angle=float(rng.uniform(0, np.pi)),
        nlos_angles=rng.uniform(0, np.pi, paths),
        distance=30.0,
        los=True,
    )


def test_pilot_book_orthogonal():
    book = PilotBook.orthogonal(5)
    gram = book.sequences.conj().T @ book.sequences
    np.testing.assert_allclose(gram, 5 * np.eye(5), atol=1e-12)
    assert all(list(book.co_pilot_set(k)) == [k] for k in range(5))


def test_despread_matches_collapsed_estimator(rng):
    """Despreading orthogonal pilots reduces to h + n / sqrt(p tau)."""
    K, M, N, p, sigma2 = 3, 2, 4, 0.1, 1e-3
    h = (rng.standard_normal((M, K, N)) + 1j * rng.standard_normal((M, K, N))) / np.sqrt(2)
    book = PilotBook.orthogonal(K)
    Y = receive_pilots(h, book, p, 0.0, rng)
    for k in range(K):
        np.testing.assert_allclose(despread(Y, book, k) / np.sqrt(p * K), h[:, k], atol=1e-12)
    # noise statistics after despreading match the collapsed form
    R = 20_000
    hz = np.zeros((R, 1, N))
    Y = receive_pilots(hz, PilotBook.orthogonal(1), p, sigma2, rng)
    err = despread(Y, PilotBook.orthogonal(1), 0) / np.sqrt(p)
    assert np.var(err) == pytest.approx(sigma2 / p, rel=0.03)


def test_ls_noise_free_exact(rng):
    h = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    np.testing.assert_array_equal(ls_estimate(h, 0.1, 3, 0.0, rng), h)
    with pytest.raises(ValueError):
        ls_estimate(h, 0.0, 3, 1.0, rng)


def test_ls_error_variance_and_power_scaling(rng):
    h = np.zeros((100_000, 4), dtype=complex)
    sigma2, tau = 2e-3, 3
    e1 = ls_estimate(h, 0.1, tau, sigma2, rng)
    e2 = ls_estimate(h, 0.2, tau, sigma2, rng)
    v1, v2 = np.mean(np.abs(e1) ** 2), np.mean(np.abs(e2) ** 2)
    assert v1 == pytest.approx(sigma2 / (0.1 * tau), rel=0.02)
    assert v1 / v2 == pytest.approx(2.0, rel=0.03)
    assert abs(np.mean(e1)) < 0.01 * np.sqrt(v1)


def test_rss_examples():
    assert rss_instant(np.zeros(4), 0.1, 3) == 0
    assert rss_instant(steering_vector(0.4, 8), 1.0, 1) == pytest.approx(8.0)
    assert rss_hardened(1e-9, 8, 0.1, 9) == pytest.approx(7.2e-9)
    assert rss_hardened(0.0, 8, 0.1, 9) == 0
    assert rss_hardened(3e-9, 16, 0.1, 9) / rss_hardened(3e-9, 8, 0.1, 9) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        rss_hardened(-1.0, 8, 0.1, 1)


def test_dft_examples():
    np.testing.assert_allclose(dft_matrix(2), [[1, 1], [1, -1]], atol=1e-15)
    assert dft_matrix(4)[1, 1] == pytest.approx(-1j)
    for n in (1, 3, 8, 16):
        F = dft_matrix(n)
        np.testing.assert_allclose(F @ F.conj().T, n * np.eye(n), atol=1e-12)
        np.testing.assert_allclose(F[0], 1)
        np.testing.assert_allclose(F[:, 0], 1)


@given(arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)))
def test_parseval_and_round_trip(re, im):
    x = re + 1j * im
    g = angular_response(x)
    assert np.sum(np.abs(g) ** 2) == pytest.approx(16 * np.sum(np.abs(x) ** 2), rel=1e-10, abs=1e-6)
    F = dft_matrix(16)
    np.testing.assert_allclose(F.conj().T @ g / 16, x, atol=1e-9)


def test_angular_response_first_basis_vector():
    e = np.zeros(8, dtype=complex)
    e[0] = 1
    np.testing.assert_allclose(angular_response(e), np.ones(8))


def test_dirichlet_limits():
    for n in (2, 3, 4, 8):
        assert _dirichlet(0.0, n) == pytest.approx(n)
        # the full element at a removable point stays equal to the direct DFT sum
        for q in (1, 2, 3):
            w = 2 * np.pi * q
            direct = np.sum(np.exp(-1j * w * np.arange(n)))
            assert _dirichlet(w, n) == pytest.approx(direct, abs=1e-9)
            assert _dirichlet(w + 1e-9, n) == pytest.approx(direct, abs=1e-6)


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_closed_form_matches_dft(n, rng):
    for _ in range(10):
        link = random_link(rng)
        h, phase, alpha = draw_channels(link.beta, link.kappa, link.los_angle, link.nlos_angles, n, rng)
        g = angular_response(h)
        cf = np.array([closed_form_element(link, phase, alpha, i, n) for i in range(n)])
        np.testing.assert_allclose(cf, g, rtol=1e-9, atol=1e-9 * np.abs(g).max())


def test_closed_form_single_path_magnitude(rng):
    link = LinkState(beta=4e-10, kappa=0.0, los_angle=0.3, nlos_angles=np.array([1.1]), distance=1.0, los=False)
    n = 8
    for i in range(n):
        w = 2 * np.pi * i / n + np.pi * np.cos(1.1)
        val = closed_form_element(link, 1.0, np.array([1.0]), i, n)
        assert abs(val) == pytest.approx(np.sqrt(link.beta) * abs(np.sin(n * w / 2) / np.sin(w / 2)), rel=1e-9)


def test_angular_power_examples(rng):
    link = LinkState(beta=3e-9, kappa=0.0, los_angle=0.2, nlos_angles=np.array([0.5, 2.0]), distance=1, los=False)
    col = angular_power(link, 1, 0.1, 1, 0.0, 100_000, rng)
    assert col[0] == pytest.approx(3e-9, rel=0.02)
    zero = LinkState(beta=0.0, kappa=0.0, los_angle=0.2, nlos_angles=np.array([0.5]), distance=1, los=False)
    np.testing.assert_array_equal(angular_power(zero, 4, 0.1, 1, 0.0, 10, rng), np.zeros(4))


def test_angular_power_trace_and_expectation(rng):
    """Monte Carlo column against the closed-form expectation and Parseval."""
    link = random_link(rng, kappa=4.0)
    N, p, tau = 8, 0.1, 3
    sigma2 = link.beta * p * tau / 10  # 10 dB estimation SNR
    mc = angular_power(link, N, p, tau, sigma2, 50_000, rng)
    ex = angular_power_expected(link, N, p, tau, sigma2)
    np.testing.assert_allclose(mc, ex, rtol=0.05)
    assert mc.sum() == pytest.approx(N * (N * link.beta + N * sigma2 / (p * tau)), rel=0.02)
    assert np.all(mc >= 0)


def test_hypothesis_at_true_position(desk):
    rss, theta = measured_feature_arrays(desk)
    for k, ue in enumerate(desk.placement.ue_xy):
        fs = hypothesis_features(ue, desk)
        np.testing.assert_array_equal(fs.rss, rss[k])
        assert fs.source == "hypothesis" and fs.position == tuple(ue)
        # same cell -> same scattering; the only gap is Monte Carlo noise
        cos = np.sum(fs.angular_power * theta[k], axis=0) / (
            np.linalg.norm(fs.angular_power, axis=0) * np.linalg.norm(theta[k], axis=0))
        assert np.all(cos > 0.9)


def test_hypothesis_monotone_in_distance(desk):
    ap = desk.placement.ap_xy[0]
    near = hypothesis_features(np.clip(ap + [3.0, 0.0], 0, 100), desk)
    far = hypothesis_features(np.clip(ap + [30.0, 0.0], 0, 100), desk)
    assert near.rss[0] > far.rss[0]


def test_hypothesis_repeat_and_same_cell(desk):
    a = hypothesis_features((12.3, 45.6), desk)
    b = hypothesis_features((12.3, 45.6), desk)
    np.testing.assert_array_equal(a.angular_power, b.angular_power)
    # another point of the same 1 m cell sees the same scatterers; with no
    # LoS term and no noise its columns are proportional to the first
    cfg = desk.config.replace(los_mode="always_nlos")
    quiet = type(desk)(**{**desk.__dict__, "noise_power": 0.0, "config": cfg})
    u = hypothesis_features((12.3, 45.6), quiet).angular_power
    v = hypothesis_features((12.9, 45.1), quiet).angular_power
    np.testing.assert_allclose(u / u.sum(axis=0), v / v.sum(axis=0), rtol=1e-9)


def test_hypothesis_rejects_outside(desk):
    with pytest.raises(ValueError):
        hypothesis_features((-1.0, 5.0), desk)
    with pytest.raises(ValueError):
        hypothesis_features((5.0, 100.5), desk)


def test_hypothesis_expected_mode_is_monte_carlo_limit(desk):
    pts = np.array([[10.0, 10.0], [70.5, 33.2]])
    _, mc = hypothesis_feature_arrays(desk, pts, cfg=FeatureConfig(realizations=20_000))
    _, ex = hypothesis_feature_arrays(desk, pts, cfg=FeatureConfig(theta_mode="expected"))
    np.testing.assert_allclose(mc, ex, rtol=0.1)


def test_hypothesis_subset_consistent(desk):
    pts = np.array([[40.0, 60.0]])
    r_all, t_all = hypothesis_feature_arrays(desk, pts)
    r_sub, t_sub = hypothesis_feature_arrays(desk, pts, aps=[2, 5])
    np.testing.assert_allclose(r_sub, r_all[:, [2, 5]])
    np.testing.assert_allclose(t_sub, t_all[:, :, [2, 5]])


def test_instant_rss_mode(desk):
    hard, _ = measured_feature_arrays(desk, FeatureConfig(realizations=4))
    inst, _ = measured_feature_arrays(desk, FeatureConfig(realizations=4, rss_mode="instant"))
    assert inst.shape == hard.shape and np.all(inst >= 0)
    assert not np.allclose(inst, hard, rtol=1e-3, atol=0)


def test_feature_set_serialisation(desk, tmp_path):
    sets = [hypothesis_features((5.0 * i, 7.0), desk) for i in range(3)]
    path = tmp_path / "f.csv"
    write_features_csv(path, sets)
    back = read_features_csv(path)
    for a, b in zip(sets, back):
        np.testing.assert_array_equal(a.rss, b.rss)
        np.testing.assert_array_equal(a.angular_power, b.angular_power)
        assert a.position == b.position
    doc = sets[1].to_dict()
    again = FeatureSet.from_dict(doc)
    np.testing.assert_array_equal(again.angular_power, sets[1].angular_power)
    measured = measured_features(desk)
    assert all(fs.source == "measured" and np.all(fs.angular_power >= 0) for fs in measured)
    with pytest.raises(ValueError):
        FeatureSet(rss=np.ones(2), angular_power=np.ones((3, 2)), source="hypothesis")
