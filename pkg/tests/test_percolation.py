import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridlock import percolation as pc
from gridlock.errors import DomainError, LoadError


def brute_blocked(lane_positions, s):
    """Every lane blocked iff some one-per-lane tuple has consecutive gaps below s."""
    if any(len(p) == 0 for p in lane_positions):
        return False
    for tup in itertools.product(*lane_positions):
        if all(abs(a - b) < s for a, b in zip(tup, tup[1:])):
            return True
    return False


def naive_formula(lanes, n, L, s):
    pair = 1 - (1 - s / L) ** 2
    return 1 - (1 - pair ** (lanes - 1)) ** (n ** lanes)


# -- pair probability --------------------------------------------------------

def test_pair_block_prob_limits():
    assert pc.pair_block_prob(1000.0, 1000.0) == 1.0
    assert pc.pair_block_prob(0.0, 1000.0) == 0.0
    with pytest.raises(DomainError):
        pc.pair_block_prob(20.0, 10.0)


def test_pair_block_prob_value_and_monte_carlo():
    assert pc.pair_block_prob(14.0, 1000.0) == pytest.approx(0.027804, abs=5e-7)
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 1_000_000)) * 1000.0
    p = np.mean(np.abs(a - b) < 14.0)
    sigma = math.sqrt(p * (1 - p) / a.size)
    assert abs(p - pc.pair_block_prob(14.0, 1000.0)) < 3 * sigma


# -- closed form ---------------------------------------------------------------

def test_zero_density():
    assert pc.percolation_prob(pc.PercolationQuery(2, 0.0, 1.0)) == 0.0
    assert pc.percolation_prob(pc.PercolationQuery(1, 0.0, 1.0)) == 0.0


def test_two_lane_reference_point():
    p = pc.percolation_prob(pc.PercolationQuery(2, 6.0, 1.0, 14.0))
    assert p == pytest.approx(0.638, abs=1e-3)
    assert p == pytest.approx(naive_formula(2, 6, 1000.0, 14.0), rel=1e-12)


@pytest.mark.parametrize("lanes, rho, L_km", [(2, 3.0, 0.5), (3, 12.0, 1.0), (4, 20.0, 2.0), (3, 0.7, 1.0)])
def test_matches_naive_formula(lanes, rho, L_km):
    got = pc.percolation_prob(pc.PercolationQuery(lanes, rho, L_km))
    assert got == pytest.approx(naive_formula(lanes, rho * L_km, 1000.0 * L_km, 14.0), rel=1e-10)


def test_single_lane_modes():
    assert pc.percolation_prob(pc.PercolationQuery(1, 0.3, 1.0)) == 1.0
    q = pc.PercolationQuery(1, 0.3, 1.0, single_lane_mode=pc.POISSON)
    assert pc.percolation_prob(q) == pytest.approx(1 - math.exp(-0.3), rel=1e-12)


def test_s_equal_L_blocks_with_any_tuple():
    assert pc.percolation_prob(pc.PercolationQuery(3, 1.0, 0.014, 14.0)) == pytest.approx(
        1 - (1 - 1.0) ** (0.014 ** 3))


@pytest.mark.parametrize("kwargs", [dict(lanes=0, rho_H=1, length_km=1), dict(lanes=2, rho_H=-1, length_km=1),
                                    dict(lanes=2, rho_H=1, length_km=0.01),
                                    dict(lanes=2, rho_H=1, length_km=1, single_lane_mode="never")])
def test_query_validation(kwargs):
    with pytest.raises(DomainError):
        pc.PercolationQuery(**kwargs)


@settings(max_examples=200, deadline=None)
@given(lanes=st.integers(1, 5), rho=st.floats(0, 60), drho=st.floats(0, 20), L=st.floats(0.1, 5))
def test_probability_bounded_and_monotone_in_density(lanes, rho, drho, L):
    p1 = float(pc.percolation_probability(lanes, rho, 1000 * L))
    p2 = float(pc.percolation_probability(lanes, rho + drho, 1000 * L))
    assert 0.0 <= p1 <= p2 + 1e-15 <= 1.0 + 1e-15


@pytest.mark.parametrize("lanes, rho, L", [(2, 15.0, 1000.0), (3, 10.0, 500.0), (2, 2.0, 2000.0),
                                           (1, 0.4, 1000.0)])
def test_length_derivative_vs_central_difference(lanes, rho, L):
    mode = pc.POISSON if lanes == 1 else pc.ALWAYS_BLOCKED
    f = lambda x: float(pc.percolation_probability(lanes, rho, x, 14.0, mode))
    fd = (f(L + 1.0) - f(L - 1.0)) / 2.0
    an = pc.percolation_prob_dL(lanes, rho, L, 14.0, mode)
    assert an == pytest.approx(fd, rel=1e-4)


# -- geometric blockage ----------------------------------------------------------

def snap(lanes, L, positions, hacked=None):
    """Snapshot with every vehicle hacked unless flags are given."""
    positions = [np.asarray(p, float) for p in positions]
    if hacked is None:
        hacked = [np.ones(p.size, bool) for p in positions]
    return pc.RoadSnapshot(lanes, L, positions, [np.asarray(h, bool) for h in hacked])


def test_snapshot_without_flags_has_no_hacked_vehicles():
    s = pc.RoadSnapshot(1, 1000.0, [np.array([300.0])])
    assert not pc.is_blocked_configuration(s)


def test_single_lane_any_hacked_blocks():
    assert pc.is_blocked_configuration(snap(1, 1000, [[300.0]]))


def test_two_lanes_far_apart_clear():
    assert not pc.is_blocked_configuration(snap(2, 1000, [[0.0], [500.0]]))


def test_three_lane_staircase_blocks():
    assert pc.is_blocked_configuration(snap(3, 1000, [[100.0], [110.0], [118.0]]), 14.0)
    assert not pc.is_blocked_configuration(snap(3, 1000, [[100.0], [110.0], [124.0]]), 14.0)


def test_strict_threshold():
    assert not pc.is_blocked_configuration(snap(2, 1000, [[100.0], [114.0]]), 14.0)


def test_hacked_flags_select_vehicles():
    s = snap(2, 1000, [[100.0, 400.0], [105.0, 700.0]], hacked=[[False, True], [True, False]])
    assert not pc.is_blocked_configuration(s)
    s = snap(2, 1000, [[100.0, 400.0], [105.0, 700.0]], hacked=[[True, False], [True, False]])
    assert pc.is_blocked_configuration(s)


def test_empty_lane_never_blocks():
    assert not pc.is_blocked_configuration(snap(2, 1000, [[10.0, 20.0], []]))


@settings(max_examples=300, deadline=None)
@given(data=st.data(), lanes=st.integers(1, 4))
def test_chain_check_matches_exhaustive_tuples(data, lanes):
    pos = [data.draw(st.lists(st.floats(0, 100, allow_nan=False), max_size=6)) for _ in range(lanes)]
    s = data.draw(st.floats(0.5, 30))
    assert pc.positions_blocked([np.array(p) for p in pos], s) == brute_blocked(pos, s)


@settings(max_examples=200, deadline=None)
@given(data=st.data(), lanes=st.integers(1, 4))
def test_extra_lane_never_makes_blocking_easier(data, lanes):
    pos = [np.array(data.draw(st.lists(st.floats(0, 100), min_size=1, max_size=6))) for _ in range(lanes + 1)]
    if pc.positions_blocked(pos, 14.0):
        assert pc.positions_blocked(pos[:-1], 14.0)


# -- Monte Carlo oracle ------------------------------------------------------------

def test_mc_trivial_cases():
    assert pc.mc_percolation_estimate(2, 0, 1000, 14, 100, rng=0).value == 0.0
    assert pc.mc_percolation_estimate(2, 3, 10, 14, 200, rng=0).value == 1.0


def test_mc_two_lane_reference_point():
    est = pc.mc_percolation_estimate(2, 6, 1000.0, 14.0, 10_000, rng=1)
    assert est.value == pytest.approx(0.64, abs=0.02)
    assert est.std_error == pytest.approx(math.sqrt(est.value * (1 - est.value) / 1e4))


def test_mc_matches_brute_force_sampler():
    # independent sampler: plain numpy positions checked by exhaustive tuples
    rng = np.random.default_rng(3)
    trials, hits = 3000, 0
    for _ in range(trials):
        hits += brute_blocked([rng.random(4) * 300.0 for _ in range(3)], 14.0)
    brute = hits / trials
    est = pc.mc_percolation_estimate(3, 4, 300.0, 14.0, 20_000, rng=4)
    sigma = math.hypot(math.sqrt(brute * (1 - brute) / trials), est.std_error)
    assert abs(brute - est.value) < 3 * sigma


def test_mc_deterministic_given_seed():
    a = pc.mc_percolation_estimate(3, 10, 1000, 14, 2500, rng=7)
    b = pc.mc_percolation_estimate(3, 10, 1000, 14, 2500, rng=7)
    assert a == b


def test_two_lane_closed_form_tracks_oracle():
    for rho in (2, 6, 12):
        est = pc.mc_percolation_estimate(2, rho, 1000.0, 14.0, 10_000, rng=rho)
        exact = pc.percolation_prob(pc.PercolationQuery(2, rho, 1.0))
        assert abs(est.value - exact) < max(0.03, 3 * est.std_error)


def test_three_lane_closed_form_overestimates():
    # tuples sharing a vehicle are not independent; the product form counts them as if they were
    est = pc.mc_percolation_estimate(3, 12, 1000.0, 14.0, 10_000, rng=5)
    exact = pc.percolation_prob(pc.PercolationQuery(3, 12.0, 1.0))
    assert exact - est.value > 5 * est.std_error


# -- snapshots -------------------------------------------------------------------

def test_snapshot_fraction_zero_and_one():
    s = snap(2, 1000, [[100.0, 500.0], [105.0, 510.0]])
    assert pc.empirical_snapshot_blockage(s, 0.0, 50, rng=0).value == 0.0
    assert pc.empirical_snapshot_blockage(s, 1.0, 50, rng=0).value == 1.0
    with pytest.raises(DomainError):
        pc.empirical_snapshot_blockage(snap(2, 1000, [[], []]), 0.5, 10, rng=0)


def test_snapshot_uniform_matches_oracle():
    rng = np.random.default_rng(9)
    n, L = 20, 1000.0
    s = snap(2, L, [rng.random(n) * L, rng.random(n) * L])
    # a random hack of a uniform snapshot is uniform within lanes, with random per-lane counts
    emp = pc.empirical_snapshot_blockage(s, 0.3, 4000, rng=10)
    hits = 0
    for _ in range(4000):
        pick = rng.choice(2 * n, size=12, replace=False)
        hits += brute_blocked([np.concatenate(s.positions)[pick[pick < n]],
                               np.concatenate(s.positions)[pick[pick >= n]]], 14.0)
    ref = hits / 4000
    sigma = math.hypot(emp.std_error, math.sqrt(ref * (1 - ref) / 4000))
    assert abs(emp.value - ref) < 3 * sigma


def test_snapshot_matches_mc_on_fresh_uniform_roads():
    # hacking every vehicle of a freshly drawn uniform road is one oracle trial
    rng = np.random.default_rng(12)
    trials, hits = 2000, 0
    for _ in range(trials):
        road = snap(2, 1000.0, [rng.random(6) * 1000.0, rng.random(6) * 1000.0])
        hits += pc.empirical_snapshot_blockage(road, 1.0, 1, rng=rng).value
    est = pc.mc_percolation_estimate(2, 6, 1000.0, 14.0, 10_000, rng=13)
    sigma = math.hypot(est.std_error, math.sqrt(hits / trials * (1 - hits / trials) / trials))
    assert abs(hits / trials - est.value) < 3 * sigma


def test_load_snapshot(tmp_path):
    f = tmp_path / "snap.csv"
    f.write_text("vehicle_id,lane,x_m,hacked\na,1,10.0,1\nb,2,15.5,1\nc,1,300,0\n")
    s = pc.load_snapshot(f, length_m=1000)
    assert s.lanes == 2 and s.L == 1000
    assert list(s.positions[0]) == [10.0, 300.0]
    assert pc.is_blocked_configuration(s)
    assert pc.load_snapshot(f).L > 300


@pytest.mark.parametrize("body", ["vehicle_id,lane\na,1\n", "vehicle_id,lane,x_m\na,1,zz\n",
                                  "vehicle_id,lane,x_m\na,1,1\nb,3,2\n", "vehicle_id,lane,x_m\n"])
def test_load_snapshot_errors(tmp_path, body):
    f = tmp_path / "bad.csv"
    f.write_text(body)
    with pytest.raises(LoadError):
        pc.load_snapshot(f)
