"""Compiled inner loops for the ring-road simulator.

State is held in flat per-vehicle arrays (x, v, lane, hacked). Every routine
that needs lane neighbours first builds ``order``/``start``/``rank``: vehicle
indices sorted by (lane, x), the offset of each lane's block in ``order`` and
each vehicle's slot in ``order``.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def idm_acc(v, dv, gap, v0, s0, T, a, b):
    s_star = s0 + v * T + v * dv / (2.0 * math.sqrt(a * b))
    if s_star < s0:
        s_star = s0
    return a * (1.0 - (v / v0) ** 4 - (s_star / gap) ** 2)


@njit(cache=True)
def sort_lanes(x, lane, n_lanes, L):
    n = x.size
    key = lane * (2.0 * L) + x
    order = np.argsort(key)
    start = np.zeros(n_lanes + 1, np.int64)
    for i in range(n):
        start[lane[i] + 1] += 1
    for k in range(n_lanes):
        start[k + 1] += start[k]
    rank = np.empty(n, np.int64)
    for r in range(n):
        rank[order[r]] = r
    return order, start, rank


@njit(cache=True)
def _leader(i, lane, order, start, rank):
    k = lane[i]
    nk = start[k + 1] - start[k]
    r = rank[i] - start[k]
    return order[start[k] + (r + 1) % nk]


@njit(cache=True)
def _follower(i, lane, order, start, rank):
    k = lane[i]
    nk = start[k + 1] - start[k]
    r = rank[i] - start[k]
    return order[start[k] + (r - 1) % nk]


@njit(cache=True)
def _acc_behind(i, j, x, v, L, d, v0, s0, T, a, b):
    # acceleration of i following j (j == i means i is alone in its lane)
    if j == i:
        return idm_acc(v[i], 0.0, L - d, v0, s0, T, a, b)
    return idm_acc(v[i], v[i] - v[j], (x[j] - x[i]) % L - d, v0, s0, T, a, b)


@njit(cache=True)
def mobil_ok(i, t, x, v, lane, hacked, order, start, rank, L, d,
             v0, s0, T, a, b, politeness, b_safe):
    """Incentive and safety test for vehicle i moving into lane t."""
    lc = _leader(i, lane, order, start, rank)
    fc = _follower(i, lane, order, start, rank)
    acc_i_old = _acc_behind(i, lc, x, v, L, d, v0, s0, T, a, b)

    nt = start[t + 1] - start[t]
    d_ft = 0.0
    if nt == 0:
        acc_i_new = idm_acc(v[i], 0.0, L - d, v0, s0, T, a, b)
    else:
        lo = 0
        hi = nt
        while lo < hi:
            mid = (lo + hi) // 2
            if x[order[start[t] + mid]] < x[i]:
                lo = mid + 1
            else:
                hi = mid
        lt = order[start[t] + lo % nt]
        ft = order[start[t] + (lo - 1) % nt]
        gap_lead = (x[lt] - x[i]) % L - d
        gap_fol = (x[i] - x[ft]) % L - d
        if gap_lead <= 0.0 or gap_fol <= 0.0:
            return False
        acc_i_new = idm_acc(v[i], v[i] - v[lt], gap_lead, v0, s0, T, a, b)
        if not hacked[ft]:
            acc_ft_new = idm_acc(v[ft], v[ft] - v[i], gap_fol, v0, s0, T, a, b)
            if acc_ft_new < -b_safe:
                return False
            if lt == ft:
                acc_ft_old = idm_acc(v[ft], 0.0, L - d, v0, s0, T, a, b)
            else:
                acc_ft_old = _acc_behind(ft, lt, x, v, L, d, v0, s0, T, a, b)
            d_ft = acc_ft_new - acc_ft_old

    d_fc = 0.0
    if fc != i and not hacked[fc]:
        acc_fc_old = _acc_behind(fc, i, x, v, L, d, v0, s0, T, a, b)
        # lc == fc leaves fc alone in the lane, which _acc_behind treats as a free ring
        acc_fc_new = _acc_behind(fc, lc, x, v, L, d, v0, s0, T, a, b)
        d_fc = acc_fc_new - acc_fc_old

    return (acc_i_new - acc_i_old) + politeness * (d_fc + d_ft) > 0.0


@njit(cache=True)
def target_lane(c, n_lanes, draw, r_threshold):
    """Lane vehicle in lane c would try this step, or -1 for no attempt.

    Edge lanes move toward the centre and only attempt when the draw passes
    the threshold; interior lanes always attempt and pick a side by the draw.
    """
    if n_lanes < 2:
        return -1
    if c == 0 or c == n_lanes - 1:
        if draw >= r_threshold:
            return -1
        return 1 if c == 0 else n_lanes - 2
    return c - 1 if draw < 0.5 else c + 1


@njit(cache=True)
def step_inplace(x, v, lane, hacked, n_lanes, draws, L, dt, d,
                 v0, s0, T, a, b, politeness, r_threshold, b_safe):
    """Advance one step. Returns (-1, -1) or the first overlapping (follower, leader) pair."""
    n = x.size
    if n == 0:
        return -1, -1
    order, start, rank = sort_lanes(x, lane, n_lanes, L)
    if n_lanes > 1:
        for i in range(n):
            if hacked[i]:
                continue
            t = target_lane(lane[i], n_lanes, draws[i], r_threshold)
            if t < 0:
                continue
            if mobil_ok(i, t, x, v, lane, hacked, order, start, rank, L, d,
                        v0, s0, T, a, b, politeness, b_safe):
                lane[i] = t
                order, start, rank = sort_lanes(x, lane, n_lanes, L)

    acc = np.zeros(n)
    for i in range(n):
        if not hacked[i]:
            acc[i] = _acc_behind(i, _leader(i, lane, order, start, rank), x, v, L, d, v0, s0, T, a, b)
    for i in range(n):
        if hacked[i]:
            continue
        x[i] = (x[i] + v[i] * dt) % L
        nv = v[i] + acc[i] * dt
        v[i] = nv if nv > 0.0 else 0.0

    order, start, rank = sort_lanes(x, lane, n_lanes, L)
    for k in range(n_lanes):
        nk = start[k + 1] - start[k]
        if nk < 2:
            continue
        for r in range(nk):
            i = order[start[k] + r]
            j = order[start[k] + (r + 1) % nk]
            if (x[j] - x[i]) % L - d <= 0.0:
                return i, j
    return -1, -1


@njit(cache=True)
def run_steps(x, v, lane, hacked, n_lanes, draws, L, dt, d,
              v0, s0, T, a, b, politeness, r_threshold, b_safe, speed_sums):
    """Advance ``draws.shape[0]`` steps, writing total speed after each into ``speed_sums``.

    Returns (failed_step, follower, leader); failed_step is -1 on success.
    """
    for k in range(draws.shape[0]):
        i, j = step_inplace(x, v, lane, hacked, n_lanes, draws[k], L, dt, d,
                            v0, s0, T, a, b, politeness, r_threshold, b_safe)
        if i >= 0:
            return k, i, j
        speed_sums[k] = v.sum()
    return -1, -1, -1
