"""Multi-lane ring-road traffic with IDM car following and MOBIL lane changes.

Vehicles drive on a periodic road of length ``L`` with ``lanes`` lanes. After a
settling period a random subset is disabled ("hacked") and stopped in place;
the remaining traffic either finds a way around or piles up behind a wall of
disabled vehicles. Flux is measured as density times mean speed.

Positions mark the front bumper; a vehicle occupies ``[x - d, x]`` and the gap
to its leader is ``x_leader - x - d`` (mod ``L``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from . import _kernels as K
from ._util import as_rng, derive_seed, parallel_map
from .errors import CapacityError, DomainError, StabilityError

ZERO_FLUX_THRESHOLD = 10.0  # veh/hr/lane
DEFAULT_HORIZON = 1000.0  # s after the hack
DEFAULT_WINDOW = 200.0  # s


@dataclass(frozen=True)
class IdmParams:
    v0: float = 120.0 / 3.6
    s0: float = 2.0
    T: float = 1.6
    a: float = 0.73
    b: float = 1.67
    d: float = 7.0

    def __post_init__(self):
        for name in ("v0", "s0", "T", "a", "b", "d"):
            if not getattr(self, name) > 0:
                raise DomainError(f"IDM parameter {name} must be > 0")

    def as_tuple(self):
        return (self.v0, self.s0, self.T, self.a, self.b)


@dataclass(frozen=True)
class MobilParams:
    p: float = 1.0
    r_threshold: float = 0.5
    b_safe: float = 4.0

    def __post_init__(self):
        if not self.p >= 0:
            raise DomainError("politeness p must be >= 0")
        if not 0.0 <= self.r_threshold <= 1.0:
            raise DomainError("r_threshold must lie in [0, 1]")
        if not self.b_safe > 0:
            raise DomainError("b_safe must be > 0")


@dataclass(frozen=True)
class RoadConfig:
    L: float = 1000.0
    lanes: int = 3
    dt: float = 0.1
    settle_steps: int = 1000
    seed: int | None = None

    def __post_init__(self):
        if not self.L > 0:
            raise DomainError("road length must be > 0")
        if int(self.lanes) != self.lanes or self.lanes < 1:
            raise DomainError("lanes must be a positive integer")
        if not self.dt > 0:
            raise DomainError("dt must be > 0")
        if self.settle_steps < 0:
            raise DomainError("settle_steps must be >= 0")


class Status(enum.Enum):
    ACTIVE = "active"
    COMPROMISED = "compromised"


@dataclass(frozen=True)
class Vehicle:
    id: int
    lane: int
    x: float
    v: float
    status: Status


@dataclass
class RoadState:
    """Snapshot of the ring road. Per-vehicle arrays are indexed by vehicle id."""

    config: RoadConfig
    x: np.ndarray
    v: np.ndarray
    lane: np.ndarray
    hacked: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.lane = np.asarray(self.lane, dtype=np.int64)
        self.hacked = np.asarray(self.hacked, dtype=np.bool_)
        n = self.x.size
        if not (self.v.size == self.lane.size == self.hacked.size == n):
            raise DomainError("per-vehicle arrays differ in length")

    @classmethod
    def from_vehicles(cls, config: RoadConfig, vehicles: Iterable[Vehicle], t: float = 0.0) -> "RoadState":
        vs = sorted(vehicles, key=lambda veh: veh.id)
        if [veh.id for veh in vs] != list(range(len(vs))):
            raise DomainError("vehicle ids must be 0..N-1")
        return cls(config,
                   [veh.x for veh in vs], [veh.v for veh in vs], [veh.lane for veh in vs],
                   [veh.status is Status.COMPROMISED for veh in vs], t)

    @property
    def n_vehicles(self) -> int:
        return int(self.x.size)

    @property
    def n_hacked(self) -> int:
        return int(self.hacked.sum())

    def copy(self) -> "RoadState":
        return RoadState(self.config, self.x.copy(), self.v.copy(), self.lane.copy(),
                         self.hacked.copy(), self.t)

    def vehicle(self, i: int) -> Vehicle:
        return Vehicle(i, int(self.lane[i]), float(self.x[i]), float(self.v[i]),
                       Status.COMPROMISED if self.hacked[i] else Status.ACTIVE)

    @property
    def vehicles(self) -> list[list[Vehicle]]:
        """Per-lane vehicle lists ordered by position."""
        out = []
        for k in range(self.config.lanes):
            idx = np.flatnonzero(self.lane == k)
            out.append([self.vehicle(int(i)) for i in idx[np.argsort(self.x[idx], kind="stable")]])
        return out

    def gaps(self, d: float) -> np.ndarray:
        """Bumper-to-bumper gap from each vehicle to its same-lane leader (L - d when alone)."""
        L = self.config.L
        out = np.empty(self.n_vehicles)
        for k in range(self.config.lanes):
            idx = np.flatnonzero(self.lane == k)
            if idx.size == 0:
                continue
            idx = idx[np.argsort(self.x[idx], kind="stable")]
            lead = np.roll(idx, -1)
            out[idx] = np.mod(self.x[lead] - self.x[idx], L) - d
            if idx.size == 1:
                out[idx] = L - d
        return out


@dataclass(frozen=True)
class FluxMeasurement:
    rho: float
    rho_H: float
    phi: float
    window: float
    zero_flux: bool


@dataclass
class FluxTrace:
    """Total speed after each recorded step, enough to compute flux."""

    L: float
    lanes: int
    dt: float
    n_vehicles: int
    n_hacked: int
    speed_sums: np.ndarray = field(repr=False)

    def measure(self, window: float | None = None, threshold: float = ZERO_FLUX_THRESHOLD) -> FluxMeasurement:
        sums = np.asarray(self.speed_sums, dtype=float)
        if window is None:
            n = sums.size
        else:
            if window <= 0:
                raise DomainError("flux window must be > 0")
            n = int(round(window / self.dt))
            if n > sums.size:
                raise DomainError(f"window {window} s exceeds recorded history {sums.size * self.dt} s")
        if n == 0:
            raise DomainError("empty flux window")
        lane_km = self.L / 1000.0 * self.lanes
        phi = float(np.mean(sums[-n:])) / (self.L * self.lanes) * 3600.0
        return FluxMeasurement(rho=self.n_vehicles / lane_km, rho_H=self.n_hacked / lane_km,
                               phi=phi, window=n * self.dt, zero_flux=phi < threshold)


def idm_acceleration(v: float, dv: float, gap: float, params: IdmParams = IdmParams()) -> float:
    """IDM acceleration for speed ``v``, approach rate ``dv`` and bumper gap ``gap``."""
    if not gap > 0:
        raise DomainError(f"gap must be > 0, got {gap}")
    if v < 0:
        raise DomainError(f"speed must be >= 0, got {v}")
    return float(K.idm_acc(float(v), float(dv), float(gap), *params.as_tuple()))


def equilibrium_speed(gap: float, params: IdmParams = IdmParams()) -> float:
    """Steady-state IDM speed at a constant bumper gap."""
    if gap <= params.s0:
        return 0.0
    f = lambda v: 1.0 - (v / params.v0) ** 4 - ((params.s0 + v * params.T) / gap) ** 2
    return float(brentq(f, 0.0, params.v0, xtol=1e-12))


def _sorted_index(state: RoadState):
    return K.sort_lanes(state.x, state.lane, state.config.lanes, state.config.L)


def mobil_decide(state: RoadState, vehicle_id: int, target_lane: int,
                 params: MobilParams = MobilParams(), idm: IdmParams = IdmParams(), rng=None) -> bool:
    """Whether ``vehicle_id`` changes into ``target_lane`` this step.

    Draws one uniform number; the change happens only if the draw is below
    ``params.r_threshold``, the politeness-weighted acceleration gain is
    positive and the new follower is not forced to brake harder than
    ``params.b_safe``.
    """
    if abs(target_lane - int(state.lane[vehicle_id])) != 1 or not 0 <= target_lane < state.config.lanes:
        raise DomainError(f"lane {target_lane} is not adjacent to vehicle {vehicle_id}")
    if state.hacked[vehicle_id]:
        return False
    draw = as_rng(rng).random()
    if draw >= params.r_threshold:
        return False
    return mobil_incentive_ok(state, vehicle_id, target_lane, params, idm)


def mobil_incentive_ok(state: RoadState, vehicle_id: int, target_lane: int,
                       params: MobilParams = MobilParams(), idm: IdmParams = IdmParams()) -> bool:
    """MOBIL incentive and safety criteria without the random gate."""
    if state.hacked[vehicle_id]:
        return False
    order, start, rank = _sorted_index(state)
    return bool(K.mobil_ok(int(vehicle_id), int(target_lane), state.x, state.v, state.lane, state.hacked,
                           order, start, rank, state.config.L, idm.d, *idm.as_tuple(),
                           params.p, params.b_safe))


def _kernel_args(state: RoadState, idm: IdmParams, mobil: MobilParams):
    c = state.config
    return (c.L, c.dt, idm.d, *idm.as_tuple(), mobil.p, mobil.r_threshold, mobil.b_safe)


def _stability_error(state: RoadState, i: int, j: int) -> StabilityError:
    return StabilityError(
        f"vehicles {i} and {j} overlap in lane {state.lane[i]} at t={state.t:.1f} s "
        f"(x={state.x[i]:.3f}, {state.x[j]:.3f}); reduce dt")


def step(state: RoadState, idm: IdmParams = IdmParams(), mobil: MobilParams = MobilParams(),
         rng=None) -> RoadState:
    """Lane-change phase then one explicit Euler step; returns a new state."""
    rng = as_rng(rng)
    new = state.copy()
    draws = rng.random(new.n_vehicles)
    i, j = K.step_inplace(new.x, new.v, new.lane, new.hacked, new.config.lanes, draws,
                          *_kernel_args(new, idm, mobil))
    new.t = state.t + state.config.dt
    if i >= 0:
        raise _stability_error(new, i, j)
    return new


def advance(state: RoadState, n_steps: int, idm: IdmParams = IdmParams(),
            mobil: MobilParams = MobilParams(), rng=None, chunk: int = 1000) -> np.ndarray:
    """Advance ``state`` in place by ``n_steps``; returns total speed after each step.

    Consumes the random stream exactly as ``n_steps`` calls to :func:`step` would.
    """
    rng = as_rng(rng)
    sums = np.zeros(n_steps)
    n = state.n_vehicles
    args = _kernel_args(state, idm, mobil)
    done = 0
    while done < n_steps:
        m = min(chunk, n_steps - done)
        draws = rng.random((m, n))
        k, i, j = K.run_steps(state.x, state.v, state.lane, state.hacked, state.config.lanes,
                              draws, *args, sums[done:done + m])
        if k >= 0:
            state.t += (k + 1) * state.config.dt
            raise _stability_error(state, i, j)
        done += m
        state.t += m * state.config.dt
    return sums


def initialize_road(config: RoadConfig, rho: float, idm: IdmParams = IdmParams(), rng=None) -> RoadState:
    """Place ``round(rho * L / 1000)`` vehicles per lane, equally spaced.

    Each lane gets a random phase so lanes are not aligned, and every vehicle a
    forward jitter of up to 10% of the spacing. Speeds start at the IDM
    equilibrium for the nominal spacing (capped at ``v0``).
    """
    if rho < 0:
        raise DomainError("density must be >= 0")
    rng = as_rng(rng)
    n = round(rho * config.L / 1000.0)
    if n == 0:
        e = np.empty(0)
        return RoadState(config, e, e, e.astype(np.int64), e.astype(bool))
    spacing = config.L / n
    if spacing <= idm.d + idm.s0:
        raise CapacityError(
            f"density {rho} veh/km/lane gives spacing {spacing:.3f} m <= d + s0 = {idm.d + idm.s0} m")
    v_init = min(idm.v0, equilibrium_speed(spacing - idm.d, idm))
    xs, lanes = [], []
    for k in range(config.lanes):
        phase = rng.uniform(0.0, spacing)
        jitter = rng.uniform(0.0, 0.1 * spacing, size=n)
        xs.append(np.mod(phase + spacing * np.arange(n) + jitter, config.L))
        lanes.append(np.full(n, k))
    x = np.concatenate(xs)
    return RoadState(config, x, np.full(x.size, v_init), np.concatenate(lanes), np.zeros(x.size, bool))


def inject_hack(state: RoadState, fraction: float, rng=None) -> RoadState:
    """Disable ``round(fraction * N)`` vehicles chosen uniformly; they stop instantly."""
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"hack fraction must lie in [0, 1], got {fraction}")
    rng = as_rng(rng)
    new = state.copy()
    k = round(fraction * new.n_vehicles)
    if k:
        pick = rng.choice(new.n_vehicles, size=k, replace=False)
        new.hacked[pick] = True
        new.v[pick] = 0.0
    return new


def trace_of(states: Sequence[RoadState]) -> FluxTrace:
    if not states:
        raise DomainError("empty flux window")
    s0 = states[0]
    return FluxTrace(s0.config.L, s0.config.lanes, s0.config.dt, s0.n_vehicles, states[-1].n_hacked,
                     np.array([st.v.sum() for st in states]))


def measure_flux(history: Sequence[RoadState] | FluxTrace, window: float | None = None,
                 threshold: float = ZERO_FLUX_THRESHOLD) -> FluxMeasurement:
    """Time-averaged flux (veh/hr/lane) over the last ``window`` seconds of ``history``.

    ``history`` is a sequence of states one ``dt`` apart, or a :class:`FluxTrace`.
    With ``window=None`` the whole history is used.
    """
    trace = history if isinstance(history, FluxTrace) else trace_of(history)
    return trace.measure(window, threshold)


def run_flux_experiment(rho: float, fraction: float, config: RoadConfig = RoadConfig(),
                        idm: IdmParams = IdmParams(), mobil: MobilParams = MobilParams(),
                        seed=None, horizon: float = DEFAULT_HORIZON, window: float = DEFAULT_WINDOW,
                        threshold: float = ZERO_FLUX_THRESHOLD) -> FluxMeasurement:
    """Initialise, settle, hack ``fraction`` of the vehicles, run ``horizon`` s and measure flux."""
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"hack fraction must lie in [0, 1], got {fraction}")
    if seed is None:
        seed = config.seed
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = initialize_road(config, rho, idm, rng)
    advance(state, config.settle_steps, idm, mobil, rng)
    state = inject_hack(state, fraction, rng)
    n_steps = int(round(horizon / config.dt))
    sums = advance(state, n_steps, idm, mobil, rng)
    trace = FluxTrace(config.L, config.lanes, config.dt, state.n_vehicles, state.n_hacked, sums)
    return trace.measure(window, threshold)


@dataclass(frozen=True)
class FluxRun:
    """One ensemble member and its outcome."""

    index: int
    seed: int
    rho: float
    fraction: float
    measurement: FluxMeasurement


def _flux_job(job):
    index, rho, fraction, seed, config, idm, mobil, horizon, window, threshold = job
    m = run_flux_experiment(rho, fraction, config, idm, mobil, seed, horizon, window, threshold)
    return FluxRun(index, seed, rho, fraction, m)


def run_flux_ensemble(points: Sequence[tuple[float, float]], master_seed: int,
                      config: RoadConfig = RoadConfig(), idm: IdmParams = IdmParams(),
                      mobil: MobilParams = MobilParams(), horizon: float = DEFAULT_HORIZON,
                      window: float = DEFAULT_WINDOW, threshold: float = ZERO_FLUX_THRESHOLD,
                      workers: int = 1) -> list[FluxRun]:
    """Run one experiment per ``(rho, fraction)`` point.

    Run ``i`` is seeded with ``derive_seed(master_seed, i)``, so the results
    are the same for any ``workers`` and each run can be repeated on its own.
    """
    jobs = [(i, float(r), float(f), derive_seed(master_seed, i), config, idm, mobil, horizon, window, threshold)
            for i, (r, f) in enumerate(points)]
    return parallel_map(_flux_job, jobs, workers)


def trajectory_rows(state: RoadState):
    """Rows ``(t, id, lane, x, v, status)`` for a trajectory dump."""
    for i in range(state.n_vehicles):
        yield (state.t, i, int(state.lane[i]), float(state.x[i]), float(state.v[i]),
               Status.COMPROMISED.value if state.hacked[i] else Status.ACTIVE.value)
