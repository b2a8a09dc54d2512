import math

import numpy as np
import pytest

from gridlock import road_sim as rs
from gridlock.errors import CapacityError, DomainError, StabilityError

IDM = rs.IdmParams()
MOBIL = rs.MobilParams()


def ref_idm(v, dv, gap, p=IDM):
    """Plain-Python IDM, written out independently of the kernel."""
    s_star = max(p.s0, p.s0 + v * p.T + v * dv / (2 * math.sqrt(p.a * p.b)))
    return p.a * (1 - (v / p.v0) ** 4 - (s_star / gap) ** 2)


def state_of(L, lanes, rows):
    """rows: (lane, x, v, hacked)"""
    cfg = rs.RoadConfig(L=L, lanes=lanes)
    return rs.RoadState(cfg, [r[1] for r in rows], [r[2] for r in rows], [r[0] for r in rows],
                        [r[3] for r in rows])


# -- IDM ---------------------------------------------------------------------

def test_idm_free_flow_equilibrium():
    assert rs.idm_acceleration(IDM.v0, 0.0, 1e12) == pytest.approx(0.0, abs=1e-9)


def test_idm_jam_equilibrium():
    assert rs.idm_acceleration(0.0, 0.0, IDM.s0) == pytest.approx(0.0, abs=1e-15)


def test_idm_reference_value():
    # s* = 2 + 20 * 1.6 = 34 m
    expected = 0.73 * (1 - (20 / (120 / 3.6)) ** 4 - (34 / 100) ** 2)
    assert rs.idm_acceleration(20.0, 0.0, 100.0) == pytest.approx(expected, rel=1e-12)
    assert rs.idm_acceleration(20.0, 0.0, 100.0) == pytest.approx(0.551, abs=5e-4)


def test_idm_s_star_floor():
    # a fast-receding leader must not push s* below s0
    assert rs.idm_acceleration(5.0, -50.0, 10.0) == pytest.approx(ref_idm(5.0, -50.0, 10.0), rel=1e-12)
    assert rs.idm_acceleration(5.0, -50.0, 10.0) == pytest.approx(
        IDM.a * (1 - (5 / IDM.v0) ** 4 - (IDM.s0 / 10) ** 2), rel=1e-12)


@pytest.mark.parametrize("gap", [0.0, -1.0])
def test_idm_rejects_non_positive_gap(gap):
    with pytest.raises(DomainError):
        rs.idm_acceleration(10.0, 0.0, gap)


def test_equilibrium_speed_zeroes_acceleration():
    v = rs.equilibrium_speed(30.0)
    assert 0 < v < IDM.v0
    assert rs.idm_acceleration(v, 0.0, 30.0) == pytest.approx(0.0, abs=1e-9)
    assert rs.equilibrium_speed(IDM.s0) == 0.0


# -- step ---------------------------------------------------------------------

def test_step_empty_road():
    st = state_of(1000.0, 3, [])
    new = rs.step(st, rng=0)
    assert new.n_vehicles == 0
    assert new.t == pytest.approx(0.1)


def test_step_single_vehicle_free_ring():
    st = state_of(1000.0, 1, [(0, 100.0, IDM.v0, False)])
    new = rs.step(st, rng=0)
    # alone on the ring, the gap is L - d and the acceleration is almost but not exactly zero
    acc = ref_idm(IDM.v0, 0.0, 1000.0 - IDM.d)
    assert new.x[0] == pytest.approx(100.0 + IDM.v0 * 0.1, abs=1e-12)
    assert new.v[0] == pytest.approx(IDM.v0 + 0.1 * acc, abs=1e-12)
    assert abs(new.v[0] - IDM.v0) < 1e-3


def test_step_hand_computed_follower():
    # follower at 0, leader 27 m ahead: gap 20 m, both at 10 m/s
    st = state_of(1000.0, 1, [(0, 0.0, 10.0, False), (0, 27.0, 10.0, False)])
    new = rs.step(st, rng=0)
    acc = 0.73 * (1 - (10 / (120 / 3.6)) ** 4 - (18 / 20) ** 2)
    assert new.v[0] == pytest.approx(10.0 + 0.1 * acc, abs=1e-12)
    assert new.x[0] == pytest.approx(1.0, abs=1e-12)


def test_step_matches_python_reference_single_lane():
    rng = np.random.default_rng(5)
    L, n = 400.0, 12
    x = np.sort(rng.uniform(0, L, n))
    x = np.arange(n) * (L / n) + rng.uniform(0, 5, n)
    v = rng.uniform(0, 20, n)
    st = state_of(L, 1, [(0, xi, vi, False) for xi, vi in zip(x, v)])
    xr, vr = x.copy(), v.copy()
    for _ in range(50):
        st = rs.step(st, rng=rng)
        order = np.argsort(xr)
        acc = np.empty(n)
        for r, i in enumerate(order):
            j = order[(r + 1) % n]
            acc[i] = ref_idm(vr[i], vr[i] - vr[j], (xr[j] - xr[i]) % L - IDM.d)
        xr = (xr + vr * 0.1) % L
        vr = np.maximum(vr + acc * 0.1, 0.0)
    np.testing.assert_allclose(st.x, xr, atol=1e-9)
    np.testing.assert_allclose(st.v, vr, atol=1e-9)


def test_step_reports_overlap():
    # leader stopped 1 m ahead of a fast follower: no dt can save this
    st = state_of(1000.0, 1, [(0, 0.0, 30.0, False), (0, 8.0, 0.0, True)])
    with pytest.raises(StabilityError, match="overlap"):
        rs.step(st, rng=0)


def test_advance_equals_repeated_step():
    cfg = rs.RoadConfig(L=1000.0, lanes=3)
    st0 = rs.initialize_road(cfg, 40, rng=np.random.default_rng(1))
    st0 = rs.inject_hack(st0, 0.1, np.random.default_rng(2))
    a = st0.copy()
    sums = rs.advance(a, 120, rng=np.random.default_rng(3), chunk=7)
    b = st0.copy()
    rng = np.random.default_rng(3)
    for _ in range(120):
        b = rs.step(b, rng=rng)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.v, b.v)
    np.testing.assert_array_equal(a.lane, b.lane)
    assert sums[-1] == pytest.approx(b.v.sum(), rel=1e-13)


# -- MOBIL ----------------------------------------------------------------------

class FixedDraw:
    """Stand-in for a Generator that always returns the same uniform draw."""

    def __init__(self, value):
        self.value = value

    def random(self, *args):
        return self.value


def ref_mobil(st, i, t, p=MOBIL, idm=IDM):
    """Straightforward MOBIL evaluation by explicit neighbour search."""
    L, d = st.config.L, idm.d

    def neighbours(lane, x, exclude):
        idx = [k for k in range(st.n_vehicles) if st.lane[k] == lane and k != exclude]
        if not idx:
            return None, None
        ahead = min(idx, key=lambda k: (st.x[k] - x) % L if (st.x[k] - x) % L > 0 else L)
        behind = min(idx, key=lambda k: (x - st.x[k]) % L if (x - st.x[k]) % L > 0 else L)
        return ahead, behind

    def acc(k, lead):
        if lead is None or lead == k:
            return ref_idm(st.v[k], 0.0, L - d, idm)
        return ref_idm(st.v[k], st.v[k] - st.v[lead], (st.x[lead] - st.x[k]) % L - d, idm)

    lc, fc = neighbours(st.lane[i], st.x[i], i)
    lt, ft = neighbours(t, st.x[i], i)
    gain = -acc(i, lc)
    if lt is None:
        gain += ref_idm(st.v[i], 0.0, L - d, idm)
    else:
        gl = (st.x[lt] - st.x[i]) % L - d
        gf = (st.x[i] - st.x[ft]) % L - d
        if gl <= 0 or gf <= 0:
            return False
        gain += ref_idm(st.v[i], st.v[i] - st.v[lt], gl, idm)
        if not st.hacked[ft]:
            new_ft = ref_idm(st.v[ft], st.v[ft] - st.v[i], gf, idm)
            if new_ft < -p.b_safe:
                return False
            gain += p.p * (new_ft - acc(ft, None if lt == ft else lt))
    if fc is not None and not st.hacked[fc]:
        gain += p.p * (acc(fc, None if lc == fc else lc) - acc(fc, i))
    return gain > 0


def test_mobil_lone_vehicle_stays():
    st = state_of(1000.0, 2, [(0, 100.0, 20.0, False)])
    assert not rs.mobil_incentive_ok(st, 0, 1)
    assert not rs.mobil_decide(st, 0, 1, rng=FixedDraw(0.0))


def test_mobil_escapes_stopped_compromised_leader():
    st = state_of(1000.0, 2, [(0, 0.0, 0.0, False), (0, 10.0, 0.0, True)])
    assert rs.mobil_decide(st, 0, 1, rng=FixedDraw(0.1))
    assert not rs.mobil_decide(st, 0, 1, rng=FixedDraw(0.9))


def test_mobil_compromised_never_moves():
    st = state_of(1000.0, 2, [(0, 0.0, 0.0, True), (0, 10.0, 0.0, True)])
    assert not rs.mobil_decide(st, 0, 1, rng=FixedDraw(0.0))
    assert not rs.mobil_decide(st, 1, 1, rng=FixedDraw(0.0))


def test_mobil_rejects_non_adjacent_lane():
    st = state_of(1000.0, 3, [(0, 0.0, 0.0, False)])
    with pytest.raises(DomainError):
        rs.mobil_decide(st, 0, 2, rng=0)


def test_mobil_matches_reference_on_random_roads():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(60):
        lanes = int(rng.integers(2, 4))
        n = int(rng.integers(2, 9))
        L = 300.0
        rows = []
        for k in range(n):
            lane = int(rng.integers(0, lanes))
            rows.append((lane, float(rng.uniform(0, L)), float(rng.uniform(0, 30)), bool(rng.random() < 0.2)))
        st = state_of(L, lanes, rows)
        if np.any(st.gaps(IDM.d)[st.hacked == st.hacked] <= 0):
            continue
        for i in range(n):
            for t in (st.lane[i] - 1, st.lane[i] + 1):
                if 0 <= t < lanes and not st.hacked[i]:
                    assert rs.mobil_incentive_ok(st, i, int(t)) == ref_mobil(st, i, int(t)), (rows, i, t)
                    checked += 1
    assert checked > 100


# -- initialisation, hack, flux --------------------------------------------------

def test_initialize_zero_density():
    assert rs.initialize_road(rs.RoadConfig(), 0, rng=0).n_vehicles == 0


def test_initialize_counts():
    st = rs.initialize_road(rs.RoadConfig(L=1000.0, lanes=3), 10, rng=0)
    assert st.n_vehicles == 30
    assert [len(lane) for lane in st.vehicles] == [10, 10, 10]
    assert np.all(st.gaps(IDM.d) > 0)


def test_initialize_capacity_error():
    with pytest.raises(CapacityError):
        rs.initialize_road(rs.RoadConfig(L=1000.0), 150, rng=0)


@pytest.mark.parametrize("fraction, expected", [(0.0, 0), (0.5, 50), (1.0, 100), (0.125, 12)])
def test_inject_hack_counts(fraction, expected):
    st = state_of(1000.0, 1, [(0, 10.0 * i, 5.0, False) for i in range(100)])
    hacked = rs.inject_hack(st, fraction, rng=3)
    assert hacked.n_hacked == expected
    assert np.all(hacked.v[hacked.hacked] == 0)
    assert st.n_hacked == 0


def test_inject_hack_rejects_bad_fraction():
    st = state_of(1000.0, 1, [(0, 0.0, 5.0, False)])
    with pytest.raises(DomainError):
        rs.inject_hack(st, 1.5, rng=0)


def test_flux_identity_36kmh():
    cfg = rs.RoadConfig(L=1000.0, lanes=3)
    st = rs.RoadState(cfg, np.arange(30) * 33.0, np.full(30, 10.0), np.arange(30) % 3, np.zeros(30, bool))
    m = rs.measure_flux([st] * 5)
    assert m.phi == pytest.approx(360.0, rel=1e-12)
    assert m.rho == pytest.approx(10.0)
    assert not m.zero_flux


def test_flux_all_stopped_and_empty():
    cfg = rs.RoadConfig(L=1000.0, lanes=2)
    stopped = rs.RoadState(cfg, [0.0, 50.0], [0.0, 0.0], [0, 1], [True, False])
    m = rs.measure_flux([stopped, stopped])
    assert m.phi == 0.0 and m.zero_flux
    empty = rs.RoadState(cfg, [], [], [], [])
    assert rs.measure_flux([empty]).phi == 0.0
    with pytest.raises(DomainError):
        rs.measure_flux([])


def test_flux_equals_density_times_mean_speed_on_live_run():
    cfg = rs.RoadConfig(L=1000.0, lanes=3)
    st = rs.initialize_road(cfg, 25, rng=np.random.default_rng(0))
    rs.advance(st, 200, rng=np.random.default_rng(1))
    m = rs.measure_flux([st])
    assert m.phi == pytest.approx(25 * st.v.mean() * 3.6, rel=1e-9)


def test_fully_hacked_road_has_zero_flux():
    m = rs.run_flux_experiment(30, 1.0, rs.RoadConfig(settle_steps=100), seed=4, horizon=50, window=20)
    assert m.phi == 0.0 and m.zero_flux


def test_free_flow_limit():
    cfg = rs.RoadConfig(L=1000.0, lanes=3)
    st = rs.initialize_road(cfg, 5, rng=np.random.default_rng(2))
    rs.advance(st, 3000, rng=np.random.default_rng(3))
    assert abs(st.v.mean() - IDM.v0) / IDM.v0 < 0.15


def test_simulation_invariants():
    cfg = rs.RoadConfig(L=1000.0, lanes=3)
    rng = np.random.default_rng(8)
    st = rs.initialize_road(cfg, 45, rng=rng)
    for _ in range(100):
        st = rs.step(st, rng=rng)
    st = rs.inject_hack(st, 0.1, rng)
    frozen = (st.lane[st.hacked].copy(), st.x[st.hacked].copy())
    mask = st.hacked.copy()
    n = st.n_vehicles
    for _ in range(600):
        st = rs.step(st, rng=rng)
        assert st.n_vehicles == n
        assert np.array_equal(st.hacked, mask)
        assert np.all(st.v >= 0)
        assert np.all(st.gaps(IDM.d) > 0)
        assert np.array_equal(st.lane[mask], frozen[0])
        assert np.array_equal(st.x[mask], frozen[1])


def test_run_is_deterministic():
    cfg = rs.RoadConfig(settle_steps=200)
    a = rs.run_flux_experiment(40, 0.1, cfg, seed=99, horizon=100, window=50)
    b = rs.run_flux_experiment(40, 0.1, cfg, seed=99, horizon=100, window=50)
    assert a == b


def test_ensemble_independent_of_workers():
    cfg = rs.RoadConfig(settle_steps=100)
    pts = [(20, 0.0), (40, 0.1), (60, 0.2)]
    one = rs.run_flux_ensemble(pts, 5, cfg, horizon=50, window=20, workers=1)
    two = rs.run_flux_ensemble(pts, 5, cfg, horizon=50, window=20, workers=2)
    assert one == two
    # each run is reproducible from its recorded seed
    r = one[1]
    assert rs.run_flux_experiment(r.rho, r.fraction, cfg, seed=r.seed, horizon=50, window=20) == r.measurement
