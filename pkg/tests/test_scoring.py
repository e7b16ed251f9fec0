import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terrainflow.heightmap import Heightmap
from terrainflow.mdp import State
from terrainflow.scoring import (
    RewardSpec,
    ScoreWeights,
    reward,
    reward_from_beta,
    score,
    score_terms,
    slope_field,
)
from terrainflow.terrain_gen import generate

PINNED_STATE = [[10, 10, 1], [40, 50, -1], [60, 20, 1], [30, 30, 1]]
PINNED_SEED = 1234
PINNED_BETA = 0.028192101096841303


def brute_slopes(v: np.ndarray, d: float) -> np.ndarray:
    """Per-pixel finite differences written out with explicit loops."""
    rows, cols = v.shape
    k = np.zeros_like(v)
    for r in range(rows):
        for c in range(cols):
            if r == 0:
                gr = (v[1, c] - v[0, c]) / d
            elif r == rows - 1:
                gr = (v[r, c] - v[r - 1, c]) / d
            else:
                gr = (v[r + 1, c] - v[r - 1, c]) / (2 * d)
            if c == 0:
                gc = (v[r, 1] - v[r, 0]) / d
            elif c == cols - 1:
                gc = (v[r, c] - v[r, c - 1]) / d
            else:
                gc = (v[r, c + 1] - v[r, c - 1]) / (2 * d)
            k[r, c] = math.atan(math.sqrt(gr * gr + gc * gc)) / (math.pi / 2)
    return k


def brute_score(h: Heightmap) -> float:
    k = brute_slopes(h.values, h.cell_size_m).ravel().tolist()
    n = len(k)
    mean_k = math.fsum(k) / n
    std_k = math.sqrt(math.fsum((x - mean_k) ** 2 for x in k) / n)
    flat = h.values.ravel().tolist()
    mean_h = math.fsum(flat) / n
    rough = math.fsum(abs(x - mean_h) for x in flat) / n / h.h0_m
    return 0.3 * std_k + 0.5 * mean_k**2 + 0.2 * rough


def test_flat_terrain_scores_zero():
    h = Heightmap(np.full((225, 225), 0.1))
    assert np.all(slope_field(h) == 0.0)
    assert score(h) == 0.0


def test_45_degree_plane_has_half_slope():
    c = 0.025
    x = np.arange(40) * c
    h = Heightmap(np.tile(x, (30, 1)), cell_size_m=c, h0_m=2.0)
    np.testing.assert_allclose(slope_field(h), 0.5, atol=1e-12)


def test_45_degree_ramp_closed_form():
    # 11 columns at 2.5 cm climb exactly h0 = 0.25 m: slope 1 everywhere
    # (one-sided borders are exact on a line), so std(k) = 0, mean(k) = 1/2,
    # and the mean |j - 5| over j = 0..10 is 30/11 cells, i.e. (3/11) h0.
    c, h0 = 0.025, 0.25
    h = Heightmap(np.tile(np.arange(11) * c, (11, 1)), c, h0)
    expected = 0.5 * 0.25 + 0.2 * 3.0 / 11.0
    assert score(h) == pytest.approx(expected, abs=1e-9)
    assert score(h) == pytest.approx(brute_score(h), abs=1e-12)


def test_wide_ramp_closed_form():
    # 225 columns; mean |j - 112| over j = 0..224 is 112 * 113 / 225 cells.
    c, h0 = 0.025, 0.25
    h = Heightmap(np.tile(np.arange(225) * c, (5, 1)), c, h0)
    expected = 0.125 + 0.2 * (112 * 113 / 225) * c / h0
    assert score(h) == pytest.approx(expected, abs=1e-9)


def test_step_edge_matches_brute_force():
    v = np.zeros((9, 12))
    v[:, 6:] = 0.05
    h = Heightmap(v, 0.025, 0.25)
    k = slope_field(h)
    np.testing.assert_allclose(k, brute_slopes(v, 0.025), atol=1e-15)
    assert set(np.argwhere(k == k.max())[:, 1]) <= {5, 6}


def test_random_terrain_matches_brute_force():
    rng = np.random.default_rng(3)
    h = Heightmap(rng.random((17, 13)) * 0.25, 0.025, 0.25)
    np.testing.assert_allclose(slope_field(h), brute_slopes(h.values, 0.025), atol=1e-14)
    assert score(h) == pytest.approx(brute_score(h), abs=1e-12)


def test_pinned_procedural_terrain():
    h = generate(State.from_triples(PINNED_STATE), PINNED_SEED)
    assert score(h) == pytest.approx(PINNED_BETA, abs=1e-12)
    assert score(h) == pytest.approx(brute_score(h), abs=1e-12)


def test_slope_field_needs_three_pixels():
    with pytest.raises(ValueError):
        slope_field(Heightmap(np.zeros((2, 5))))


def test_mean_of_squares_variant():
    rng = np.random.default_rng(4)
    h = Heightmap(rng.random((10, 10)) * 0.25)
    k = slope_field(h)
    _, slopes, _ = score_terms(h, ScoreWeights(mean_of_squares=True))
    assert slopes == pytest.approx(0.5 * np.mean(k**2))
    assert slopes > score_terms(h)[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1, 1), st.integers(0, 3), st.booleans())
def test_score_symmetries(seed, shift, turns, mirror):
    v = np.random.default_rng(seed).random((12, 12)) * 0.25
    base = score(Heightmap(v))
    w = np.rot90(v, turns)
    if mirror:
        w = w[:, ::-1]
    assert score(Heightmap(w + shift)) == pytest.approx(base, abs=1e-9)


def test_reward_spot_values():
    assert reward_from_beta(0.04, RewardSpec.hard()) == pytest.approx(1.000001, abs=1e-12)
    assert reward_from_beta(0.05, RewardSpec.hard()) == pytest.approx(31.6228, abs=1e-4)
    assert reward_from_beta(0.055, RewardSpec.medium()) == pytest.approx(22026.4658 + 1e-6, abs=1e-3)


@given(st.floats(0, 0.2), st.floats(0, 0.2))
def test_hard_reward_monotone(a, b):
    if a < b:
        assert reward_from_beta(a, RewardSpec.hard()) <= reward_from_beta(b, RewardSpec.hard())


@given(st.floats(0, 0.5))
def test_medium_reward_peaks_at_target(beta):
    spec = RewardSpec.medium()
    r = reward_from_beta(beta, spec)
    assert 0 < r <= reward_from_beta(0.055, spec)
    closer = 0.055 + 0.5 * (beta - 0.055)
    if abs(beta - 0.055) > 1e-9:
        assert reward_from_beta(closer, spec) > r


@given(st.floats(0, 1))
def test_rewards_positive(beta):
    assert reward_from_beta(beta, RewardSpec.hard()) > 0
    assert reward_from_beta(beta, RewardSpec.medium()) > 0


def test_reward_of_heightmap():
    h = Heightmap(np.full((5, 5), 0.1))
    assert reward(h, RewardSpec.hard()) == pytest.approx(1e-6 + 1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        RewardSpec(epsilon=0.0)
    with pytest.raises(ValueError):
        RewardSpec.medium(1.5)
    with pytest.raises(ValueError):
        ScoreWeights(lambda1=-0.1)
