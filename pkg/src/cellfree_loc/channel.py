"""Rician channel realizations and ULA steering vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import LinkState, Scenario

TAG_BLOCK = 37


def steering_vector(theta, n_antennas: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """ULA response ``exp(-j 2 pi n (spacing/lambda) cos theta)``, n = 0..N-1.

    ``theta`` may be an array; the antenna axis is appended last.
    """
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    n = np.arange(n_antennas)
    phase = -2j * np.pi * spacing_ratio * np.multiply.outer(np.cos(theta), n)
    return np.exp(phase)


@dataclass(frozen=True)
class ChannelRealization:
    h: np.ndarray  # (M, K, N) complex
    phase: np.ndarray  # (M, K) unit modulus
    small_scale: np.ndarray  # (M, K, L) complex
    block_index: int = 0


def block_rng(seed: int, block_index: int) -> np.random.Generator:
    """Independent substream for one coherence block, keyed by (seed, block)."""
    return np.random.default_rng([int(seed), TAG_BLOCK, int(block_index)])


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_channels(beta, kappa, los_angle, nlos_angles, n_antennas: int, rng, spacing_ratio: float = 0.5):
    """Vectorised Rician draw over any batch of links.

    ``nlos_angles`` has a trailing path axis; the rest broadcast together.
    Returns ``(h, phase, alpha)``.
    """
    beta = np.asarray(beta, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    nlos_angles = np.asarray(nlos_angles, dtype=float)
    batch = np.broadcast_shapes(beta.shape, kappa.shape, np.shape(los_angle), nlos_angles.shape[:-1])
    paths = nlos_angles.shape[-1]

    mu = rng.uniform(0.0, 2.0 * np.pi, size=batch)
    phase = np.exp(1j * mu)
    alpha = complex_normal(rng, batch + (paths,))

    los_gain = np.sqrt(kappa * beta / (kappa + 1.0))
    nlos_gain = np.sqrt(beta / (paths * (kappa + 1.0)))
    a_los = steering_vector(los_angle, n_antennas, spacing_ratio)
    a_nlos = steering_vector(nlos_angles, n_antennas, spacing_ratio)
    scatter = np.einsum("...l,...ln->...n", alpha, a_nlos)
    h = (los_gain * phase)[..., None] * a_los + nlos_gain[..., None] * scatter
    return h, phase, alpha


def draw_channel(link: LinkState, n_antennas: int, rng, spacing_ratio: float = 0.5) -> np.ndarray:
    """One fresh realization of ``h_mk`` for a single link."""
    h, _, _ = draw_channels(link.beta, link.kappa, link.los_angle, link.nlos_angles, n_antennas, rng,
                            spacing_ratio)
    return h


def realize_block(scenario: Scenario, block_index: int) -> ChannelRealization:
    """All M x K channels of one coherence block, reproducible from the seed."""
    rng = block_rng(scenario.config.seed, block_index)
    h, phase, alpha = draw_channels(
        scenario.beta, scenario.kappa, scenario.los_angle, scenario.nlos_angles,
        scenario.N, rng, scenario.config.spacing_ratio,
    )
    return ChannelRealization(h=h, phase=phase, small_scale=alpha, block_index=block_index)
