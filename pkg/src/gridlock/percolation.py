"""Road-level percolation of disabled vehicles.

A multi-lane road is blocked when one disabled vehicle per lane forms a chain
across all lanes with every adjacent-lane pair closer than the blocking
distance ``s`` (twice the effective vehicle length). This module gives the
closed-form blocking probability, a Monte Carlo estimate of the same event,
an exact checker for concrete vehicle snapshots and an analyzer that hacks
random subsets of an observed snapshot.

Lengths are metres everywhere except where a name says ``_km``; densities are
vehicles per km per lane.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from ._util import as_rng
from .errors import DomainError, LoadError

ALWAYS_BLOCKED = "always"
POISSON = "poisson"
SINGLE_LANE_MODES = (ALWAYS_BLOCKED, POISSON)

DEFAULT_VEHICLE_LENGTH = 7.0
DEFAULT_BLOCKING_DISTANCE = 2 * DEFAULT_VEHICLE_LENGTH

_MC_CHUNK = 1000


@dataclass(frozen=True)
class PercolationQuery:
    lanes: int
    rho_H: float
    length_km: float
    s: float = DEFAULT_BLOCKING_DISTANCE
    single_lane_mode: str = ALWAYS_BLOCKED

    def __post_init__(self):
        if int(self.lanes) != self.lanes or self.lanes < 1:
            raise DomainError(f"lanes must be a positive integer, got {self.lanes}")
        if not self.rho_H >= 0:
            raise DomainError(f"rho_H must be >= 0, got {self.rho_H}")
        if not self.length_km > 0:
            raise DomainError(f"road length must be > 0, got {self.length_km} km")
        if not 0 < self.s <= 1000.0 * self.length_km:
            raise DomainError(f"need 0 < s <= L, got s={self.s} m, L={1000.0 * self.length_km} m")
        if self.single_lane_mode not in SINGLE_LANE_MODES:
            raise DomainError(f"unknown single-lane mode {self.single_lane_mode!r}")

    @property
    def length_m(self) -> float:
        return 1000.0 * self.length_km

    @property
    def n_per_lane(self) -> float:
        """Expected disabled vehicles per lane (real valued)."""
        return self.length_km * self.rho_H


@dataclass(frozen=True)
class ProbabilityEstimate:
    value: float
    std_error: float
    trials: int

    @classmethod
    def from_counts(cls, hits: int, trials: int) -> "ProbabilityEstimate":
        p = hits / trials
        return cls(p, math.sqrt(p * (1.0 - p) / trials), trials)


def pair_block_prob(s: float, L: float) -> float:
    """Probability that two uniform positions on [0, L] lie closer than ``s``."""
    if s < 0 or L <= 0:
        raise DomainError(f"need s >= 0 and L > 0, got s={s}, L={L}")
    if s > L:
        raise DomainError(f"blocking distance {s} exceeds road length {L}")
    x = s / L
    return x * (2.0 - x)


def percolation_probability(lanes, rho_H, length_m, s=DEFAULT_BLOCKING_DISTANCE,
                            single_lane_mode=ALWAYS_BLOCKED):
    """Vectorised closed-form blocking probability.

    Broadcasts over array arguments. No validation beyond what numpy does;
    use :func:`percolation_prob` for checked scalar queries.
    """
    lanes, rho_H, length_m = np.broadcast_arrays(
        np.asarray(lanes, dtype=float), np.asarray(rho_H, dtype=float),
        np.asarray(length_m, dtype=float))
    s = float(s)
    n = length_m / 1000.0 * rho_H
    x = s / length_m
    pair = x * (2.0 - x)
    tuple_blocks = pair ** (lanes - 1.0)
    tuples = n ** lanes
    with np.errstate(divide="ignore", invalid="ignore"):
        log_clear = np.log1p(-tuple_blocks)
        p = -np.expm1(tuples * log_clear)
    p = np.where(tuples == 0, 0.0, p)
    p = np.where((tuple_blocks >= 1.0) & (tuples > 0), 1.0, p)
    single = lanes == 1
    if single.any():
        if single_lane_mode == POISSON:
            p = np.where(single, -np.expm1(-n), p)
        else:
            p = np.where(single, (n > 0).astype(float), p)
    return np.clip(p, 0.0, 1.0)


def percolation_prob(q: PercolationQuery) -> float:
    return float(percolation_probability(q.lanes, q.rho_H, q.length_m, q.s, q.single_lane_mode))


def percolation_prob_dL(lanes: int, rho_H: float, length_m: float, s: float = DEFAULT_BLOCKING_DISTANCE,
                        single_lane_mode: str = ALWAYS_BLOCKED) -> float:
    """Analytic derivative of the blocking probability with respect to road length (per metre)."""
    L = float(length_m)
    rho = float(rho_H) / 1000.0  # per metre
    if rho == 0:
        return 0.0
    if lanes == 1:
        if single_lane_mode == POISSON:
            return rho * math.exp(-rho * L)
        return 0.0
    m = lanes - 1
    x = s / L
    pair = x * (2.0 - x)
    dpair = -2.0 * s / L**2 * (1.0 - x)
    q = 1.0 - pair**m
    if q <= 0.0:
        return 0.0
    N = (L * rho) ** lanes
    dN = lanes * L ** (lanes - 1) * rho**lanes
    dlogq = -m * pair ** (m - 1) * dpair / q
    E = N * math.log(q)
    dE = dN * math.log(q) + N * dlogq
    return -math.exp(E) * dE


# ---------------------------------------------------------------------------
# geometric blockage


@njit(cache=True)
def _chain_blocked(pos, starts, s):
    # pos: per-lane ascending positions concatenated; lane k is pos[starts[k]:starts[k+1]]
    lanes = starts.size - 1
    n0 = starts[1] - starts[0]
    if n0 == 0:
        return False
    reach = pos[starts[0]:starts[1]].copy()
    nreach = n0
    for k in range(1, lanes):
        lane = pos[starts[k]:starts[k + 1]]
        nxt = np.empty(lane.size)
        m = 0
        i = 0
        for y in lane:
            while i < nreach and reach[i] <= y - s:
                i += 1
            if i < nreach and reach[i] < y + s:
                nxt[m] = y
                m += 1
        if m == 0:
            return False
        reach = nxt
        nreach = m
    return True


@njit(cache=True)
def _count_blocked_uniform(pos, s):
    # pos: (trials, lanes, n) sorted along the last axis
    trials, lanes, n = pos.shape
    starts = np.arange(lanes + 1) * n
    hits = 0
    for t in range(trials):
        if _chain_blocked(pos[t].ravel(), starts, s):
            hits += 1
    return hits


@dataclass
class RoadSnapshot:
    """Vehicle positions on a straight multi-lane road at one instant."""

    lanes: int
    L: float
    positions: list[np.ndarray]
    hacked: list[np.ndarray] | None = None
    ids: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.positions) != self.lanes:
            raise DomainError(f"expected {self.lanes} lanes of positions, got {len(self.positions)}")
        self.positions = [np.asarray(p, dtype=float) for p in self.positions]
        for p in self.positions:
            if p.size and (p.min() < 0 or p.max() >= self.L):
                raise DomainError("snapshot positions must lie in [0, L)")
        if self.hacked is not None:
            self.hacked = [np.asarray(h, dtype=bool) for h in self.hacked]
            if [h.size for h in self.hacked] != [p.size for p in self.positions]:
                raise DomainError("hacked flags do not match positions")

    @property
    def n_vehicles(self) -> int:
        return sum(p.size for p in self.positions)

    def hacked_positions(self) -> list[np.ndarray]:
        if self.hacked is None:
            return [p[:0] for p in self.positions]
        return [p[h] for p, h in zip(self.positions, self.hacked)]


def _pack(lane_positions: Sequence[np.ndarray]):
    sorted_lanes = [np.sort(np.asarray(p, dtype=float)) for p in lane_positions]
    starts = np.zeros(len(sorted_lanes) + 1, dtype=np.int64)
    starts[1:] = np.cumsum([p.size for p in sorted_lanes])
    pos = np.concatenate(sorted_lanes) if sorted_lanes else np.empty(0)
    return pos, starts


def positions_blocked(lane_positions: Sequence[np.ndarray], s: float) -> bool:
    """True if the given disabled-vehicle positions (one array per lane) block every lane."""
    if len(lane_positions) == 0:
        return False
    pos, starts = _pack(lane_positions)
    return bool(_chain_blocked(pos, starts, float(s)))


def is_blocked_configuration(snapshot: RoadSnapshot, s: float = DEFAULT_BLOCKING_DISTANCE) -> bool:
    return positions_blocked(snapshot.hacked_positions(), s)


def mc_percolation_estimate(lanes: int, n_per_lane: int, L: float, s: float, trials: int,
                            rng=None) -> ProbabilityEstimate:
    """Monte Carlo blocking probability with ``n_per_lane`` uniform disabled vehicles per lane.

    Trials are drawn in fixed-size chunks, each from its own stream seeded off
    ``rng``, so the result for a given seed does not depend on how chunks are
    scheduled.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if lanes < 1 or n_per_lane < 0:
        raise DomainError("need lanes >= 1 and n_per_lane >= 0")
    if n_per_lane == 0:
        return ProbabilityEstimate(0.0, 0.0, trials)
    rng = as_rng(rng)
    n_chunks = -(-trials // _MC_CHUNK)
    seeds = rng.integers(0, 2**63 - 1, size=n_chunks)
    hits = 0
    for c, seed in enumerate(seeds):
        size = min(_MC_CHUNK, trials - c * _MC_CHUNK)
        pos = np.random.default_rng(int(seed)).random((size, lanes, n_per_lane)) * L
        pos.sort(axis=2)
        hits += int(_count_blocked_uniform(pos, float(s)))
    return ProbabilityEstimate.from_counts(hits, trials)


def empirical_snapshot_blockage(snapshot: RoadSnapshot, fraction: float, trials: int,
                                rng=None, s: float = DEFAULT_BLOCKING_DISTANCE) -> ProbabilityEstimate:
    """Fraction of random hacks of ``snapshot`` that block the road.

    Each trial disables ``round(fraction * N)`` vehicles chosen uniformly; any
    hacked flags already on the snapshot are ignored.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"fraction must lie in [0, 1], got {fraction}")
    N = snapshot.n_vehicles
    if N == 0:
        raise DomainError("snapshot has no vehicles")
    if trials < 1:
        raise DomainError("trials must be >= 1")
    k = round(fraction * N)
    if k == 0:
        return ProbabilityEstimate(0.0, 0.0, trials)
    rng = as_rng(rng)
    lane_of = np.concatenate([np.full(p.size, i) for i, p in enumerate(snapshot.positions)])
    x = np.concatenate(snapshot.positions)
    starts = np.zeros(snapshot.lanes + 1, dtype=np.int64)
    s = float(s)
    hits = 0
    for _ in range(trials):
        pick = rng.choice(N, size=k, replace=False)
        # sort by (lane, x) so each lane's block is ascending
        order = np.lexsort((x[pick], lane_of[pick]))
        pick = pick[order]
        starts[1:] = np.cumsum(np.bincount(lane_of[pick], minlength=snapshot.lanes))
        hits += bool(_chain_blocked(x[pick], starts, s))
    return ProbabilityEstimate.from_counts(hits, trials)


def snapshot_densities(snapshot: RoadSnapshot, fraction: float) -> dict:
    """Disabled-vehicle densities implied by hacking ``fraction`` of a snapshot.

    Returns the aggregate density (all lanes pooled) and the per-lane densities.
    """
    L_km = snapshot.L / 1000.0
    per_lane = [fraction * p.size / L_km for p in snapshot.positions]
    aggregate = round(fraction * snapshot.n_vehicles) / (L_km * snapshot.lanes)
    return {"aggregate": aggregate, "per_lane": per_lane}


def load_snapshot(path: str | Path, length_m: float | None = None) -> RoadSnapshot:
    """Read a ``vehicle_id,lane,x_m[,hacked]`` CSV.

    Lane labels must be contiguous integers; they are shifted to start at 0.
    Without ``length_m`` the road length is taken just beyond the furthest vehicle.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = {"vehicle_id", "lane", "x_m"} - set(header)
            if missing:
                raise LoadError(f"{path}: missing columns {sorted(missing)}")
            has_hacked = "hacked" in header
            rows = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    rows.append((row["vehicle_id"], int(row["lane"]), float(row["x_m"]),
                                 bool(int(row["hacked"])) if has_hacked else False))
                except (TypeError, ValueError) as exc:
                    raise LoadError(f"{path}:{lineno}: bad record {row}") from exc
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise LoadError(f"{path}: no vehicles")
    labels = sorted({r[1] for r in rows})
    if labels != list(range(labels[0], labels[-1] + 1)):
        raise LoadError(f"{path}: lane labels not contiguous: {labels}")
    lanes = len(labels)
    xs = [r[2] for r in rows]
    if min(xs) < 0:
        raise LoadError(f"{path}: negative position")
    L = float(length_m) if length_m is not None else float(np.nextafter(max(xs), np.inf))
    positions, hacked, ids = [], [], []
    for k in range(lanes):
        sel = [r for r in rows if r[1] - labels[0] == k]
        positions.append(np.array([r[2] for r in sel]))
        hacked.append(np.array([r[3] for r in sel], dtype=bool))
        ids.append(np.array([r[0] for r in sel]))
    return RoadSnapshot(lanes, L, positions, hacked if has_hacked else None, ids)
