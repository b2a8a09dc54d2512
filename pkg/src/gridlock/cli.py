"""Command-line experiment driver.

Every subcommand writes one CSV plus ``<out>.manifest.json`` holding the tool
version, the fully resolved parameters and digests of input files. Passing a
manifest back through ``--config`` repeats the run exactly.

Exit codes: 0 success, 2 usage error, 3 input-data error, 4 numerical error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import city_graph as cg
from . import percolation as pc
from . import road_sim as rs
from ._util import configure_logging, derive_rng, fmt
from .errors import DomainError, GridlockError, LoadError, StabilityError

log = logging.getLogger("gridlock.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(GridlockError):
    pass


def _floats(value) -> list[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).replace(",", " ").split()]


def _ints(value) -> list[int]:
    return [int(round(v)) for v in _floats(value)]


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class Param:
    name: str
    type: Callable[[Any], Any]
    default: Any = None
    help: str = ""
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


SEED = Param("seed", int, None, "master RNG seed (required for stochastic commands)")
OUT = Param("out", str, None, "output CSV path", required=True)
WORKERS = Param("workers", int, 1, "parallel worker processes")

ROAD = [
    Param("lanes", int, 3, "number of lanes"),
    Param("length_m", float, 1000.0, "ring length (m)"),
    Param("dt", float, 0.1, "integration step (s)"),
    Param("settle_steps", int, 1000, "steps before the hack"),
    Param("horizon", float, rs.DEFAULT_HORIZON, "simulated time after the hack (s)"),
    Param("window", float, rs.DEFAULT_WINDOW, "flux averaging window at the end (s)"),
    Param("threshold", float, rs.ZERO_FLUX_THRESHOLD, "zero-flux threshold (veh/hr/lane)"),
    Param("v0", float, 120.0 / 3.6, "desired speed (m/s)"),
    Param("s0", float, 2.0, "jam gap (m)"),
    Param("T", float, 1.6, "time headway (s)"),
    Param("a", float, 0.73, "max acceleration (m/s^2)"),
    Param("b", float, 1.67, "comfortable deceleration (m/s^2)"),
    Param("d", float, 7.0, "effective vehicle length (m)"),
    Param("politeness", float, 1.0, "MOBIL politeness factor"),
    Param("r_threshold", float, 0.5, "per-step lane-change attempt probability"),
    Param("b_safe", float, 4.0, "max deceleration imposed on a new follower (m/s^2)"),
]

GRAPH = [
    Param("graph", str, None, "street network (.graphml or .csv); a grid is generated when absent"),
    Param("nodes", str, None, "node CSV (node_id,x,y) for a CSV edge list"),
    Param("rows", int, 50, "generated grid rows"),
    Param("cols", int, 50, "generated grid columns"),
    Param("length_min", float, 80.0, "generated street length lower bound (m)"),
    Param("length_max", float, 200.0, "generated street length upper bound (m)"),
    Param("lane_choices", _ints, [1, 2, 3], "lane counts sampled uniformly for generated streets"),
    Param("grid_seed", int, None, "seed for the generated grid (defaults to --seed)"),
]

PERC = [
    Param("s_m", float, pc.DEFAULT_BLOCKING_DISTANCE, "blocking distance (m)"),
    Param("mode", str, pc.ALWAYS_BLOCKED, "single-lane rule: always | poisson"),
]


@dataclass(frozen=True)
class Command:
    name: str
    params: list[Param]
    stochastic: bool
    help: str
    run: Callable = None


COMMANDS: dict[str, Command] = {}


def command(name, params, stochastic, help):
    def register(fn):
        COMMANDS[name] = Command(name, params, stochastic, help, fn)
        return fn
    return register


@dataclass
class ExperimentConfig:
    command: str
    params: dict
    config_path: str | None = None

    @property
    def seed(self) -> int | None:
        return self.params.get("seed")

    @property
    def replicates(self) -> int | None:
        return self.params.get("replicates")

    @property
    def out(self) -> Path:
        return Path(self.params["out"])


@dataclass
class RunOutput:
    header: list[str]
    rows: list[list]
    inputs: list[str] = field(default_factory=list)
    results: dict = field(default_factory=dict)
    extra_files: dict[str, Callable[[Path], None]] = field(default_factory=dict)
    write_main: Callable[[Path], None] | None = None


# ---------------------------------------------------------------------------
# config resolution


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridlock", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gridlock {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for cmd in COMMANDS.values():
        p = sub.add_parser(cmd.name, help=cmd.help, description=cmd.help)
        p.add_argument("--config", help="JSON config file or run manifest; flags override it")
        for prm in cmd.params:
            kw = dict(dest=prm.name, default=argparse.SUPPRESS, help=f"{prm.help} (default: {prm.default})")
            if prm.type in (_floats, _ints):
                kw["type"] = str
            else:
                kw["type"] = prm.type
            p.add_argument(prm.flag, **kw)
    return parser


def _read_config_file(path: str, command: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    if "params" in data and "command" in data:
        if data["command"] != command:
            raise UsageError(f"manifest {path} is for command {data['command']!r}, not {command!r}")
        data = data["params"]
    return data


def parse_config(argv: list[str] | None = None) -> ExperimentConfig:
    """Resolve defaults, then config file values, then command-line flags."""
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise UsageError("invalid command line") from None
    name = ns.pop("command")
    cmd = COMMANDS[name]
    config_path = ns.pop("config", None)
    known = {p.name: p for p in cmd.params}
    raw: dict[str, Any] = {}
    if config_path:
        file_values = _read_config_file(config_path, name)
        unknown = sorted(set(file_values) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s) for {name}: {', '.join(unknown)}")
        raw.update(file_values)
    raw.update(ns)
    params = {}
    for prm in cmd.params:
        value = raw.get(prm.name, prm.default)
        if value is not None:
            try:
                value = prm.type(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {prm.name}: {value!r} ({exc})") from None
        elif prm.required:
            raise UsageError(f"{name}: {prm.flag} is required")
        params[prm.name] = value
    if cmd.stochastic and params.get("seed") is None:
        raise UsageError(f"{name} is stochastic and needs an explicit --seed")
    return ExperimentConfig(name, params, config_path)


# ---------------------------------------------------------------------------
# helpers shared by commands


def _road_models(p):
    config = rs.RoadConfig(L=p["length_m"], lanes=p["lanes"], dt=p["dt"], settle_steps=p["settle_steps"])
    idm = rs.IdmParams(p["v0"], p["s0"], p["T"], p["a"], p["b"], p["d"])
    mobil = rs.MobilParams(p["politeness"], p["r_threshold"], p["b_safe"])
    return config, idm, mobil


def _graph(p, out: RunOutput) -> cg.CityGraph:
    if p.get("graph"):
        out.inputs.append(p["graph"])
        if p.get("nodes"):
            out.inputs.append(p["nodes"])
        return cg.load_graph(p["graph"], nodes_path=p.get("nodes"))
    gseed = p.get("grid_seed")
    if gseed is None:
        gseed = p.get("seed")
    if gseed is None:
        raise UsageError("a generated grid needs --grid-seed (or --seed)")
    p["grid_seed"] = gseed
    return cg.generate_grid(p["rows"], p["cols"], (p["length_min"], p["length_max"]),
                            p["lane_choices"], seed=gseed)


def _rho_grid(p) -> list[float]:
    if p.get("rho_h"):
        return p["rho_h"]
    n = int(round((p["rho_max"] - p["rho_min"]) / p["rho_step"])) + 1
    return [p["rho_min"] + i * p["rho_step"] for i in range(n)]


FLUX_HEADER = ["seed", "rho", "fraction", "rho_H", "phi", "zero_flux"]


# ---------------------------------------------------------------------------
# commands


@command("road-sim", [Param("rho", float, None, "density (veh/km/lane)", required=True),
                      Param("fraction", float, 0.0, "fraction of vehicles hacked"),
                      *ROAD,
                      Param("trajectory", str, None, "optional trajectory CSV (t,id,lane,x,v,status)"),
                      Param("trajectory_every", int, 10, "steps between trajectory samples"),
                      SEED, OUT],
         stochastic=True, help="single ring-road run with a hack")
def cmd_road_sim(p):
    config, idm, mobil = _road_models(p)
    out = RunOutput(FLUX_HEADER, [])
    if p["trajectory"]:
        rng = np.random.default_rng(p["seed"])
        state = rs.initialize_road(config, p["rho"], idm, rng)
        frames = []
        every = max(1, p["trajectory_every"])

        def run(n_steps, st):
            sums = np.zeros(n_steps)
            done = 0
            while done < n_steps:
                m = min(every, n_steps - done)
                sums[done:done + m] = rs.advance(st, m, idm, mobil, rng)
                done += m
                frames.extend(rs.trajectory_rows(st))
            return sums

        frames.extend(rs.trajectory_rows(state))
        run(config.settle_steps, state)
        state = rs.inject_hack(state, p["fraction"], rng)
        sums = run(int(round(p["horizon"] / config.dt)), state)
        trace = rs.FluxTrace(config.L, config.lanes, config.dt, state.n_vehicles, state.n_hacked, sums)
        m = trace.measure(p["window"], p["threshold"])

        def write_traj(path: Path):
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", "id", "lane", "x", "v", "status"])
                for row in frames:
                    w.writerow([fmt(x) for x in row])

        out.extra_files[p["trajectory"]] = write_traj
    else:
        m = rs.run_flux_experiment(p["rho"], p["fraction"], config, idm, mobil, p["seed"],
                                   p["horizon"], p["window"], p["threshold"])
    out.rows.append([p["seed"], m.rho, p["fraction"], m.rho_H, m.phi, m.zero_flux])
    return out


@command("flux-sweep", [Param("rho", _floats, [float(r) for r in range(5, 151, 5)], "densities (veh/km/lane)"),
                        Param("fraction", _floats, [0.0], "hack fractions"),
                        Param("replicates", int, 1, "runs per (rho, fraction)"),
                        Param("skip_infeasible", _bool, True, "skip densities above bumper-to-bumper capacity"),
                        *ROAD, SEED, WORKERS, OUT],
         stochastic=True, help="ensemble of ring-road runs over densities and hack fractions")
def cmd_flux_sweep(p):
    config, idm, mobil = _road_models(p)
    spacing_limit = idm.d + idm.s0
    points, skipped = [], []
    for rho in p["rho"]:
        n = round(rho * config.L / 1000.0)
        if n and config.L / n <= spacing_limit:
            if not p["skip_infeasible"]:
                raise rs.CapacityError(f"density {rho} exceeds capacity")
            skipped.append(rho)
            continue
        for f in p["fraction"]:
            points.extend([(rho, f)] * p["replicates"])
    if skipped:
        log.warning("skipped densities above capacity: %s", skipped)
    runs = rs.run_flux_ensemble(points, p["seed"], config, idm, mobil, p["horizon"], p["window"],
                                p["threshold"], workers=p["workers"])
    rows = [[r.seed, r.measurement.rho, r.fraction, r.measurement.rho_H, r.measurement.phi,
             r.measurement.zero_flux] for r in runs]
    return RunOutput(FLUX_HEADER, rows, results={"skipped_rho": skipped})


PROB_HEADER = ["lanes", "rho_H", "length_km", "s_m", "value", "std_error", "trials"]


@command("percolation", [Param("lanes", int, 2, "number of lanes"),
                         Param("rho_h", _floats, None, "compromised densities (veh/km/lane)", required=True),
                         Param("length_km", float, 1.0, "road length (km)"),
                         *PERC,
                         Param("l0_m", float, 0.0, "intersection length for the correction term (m)"),
                         SEED, OUT],
         stochastic=False, help="closed-form blocking probability")
def cmd_percolation(p):
    header = list(PROB_HEADER)
    if p["l0_m"] > 0:
        header += ["l0_m", "delta_intersection"]
    rows = []
    for rho in p["rho_h"]:
        q = pc.PercolationQuery(p["lanes"], rho, p["length_km"], p["s_m"], p["mode"])
        row = [q.lanes, rho, q.length_km, q.s, pc.percolation_prob(q), 0.0, 0]
        if p["l0_m"] > 0:
            row += [p["l0_m"], cg.intersection_correction(q.length_m, q.lanes, rho, q.s, p["l0_m"], q.single_lane_mode)]
        rows.append(row)
    return RunOutput(header, rows)


@command("mc-oracle", [Param("lanes", int, 2, "number of lanes"),
                       Param("rho_h", _floats, None, "compromised densities (veh/km/lane)", required=True),
                       Param("length_km", float, 1.0, "road length (km)"),
                       Param("s_m", float, pc.DEFAULT_BLOCKING_DISTANCE, "blocking distance (m)"),
                       Param("trials", int, 10000, "Monte Carlo trials per density"),
                       SEED, OUT],
         stochastic=True, help="Monte Carlo blocking probability with uniform vehicle positions")
def cmd_mc_oracle(p):
    rows = []
    for i, rho in enumerate(p["rho_h"]):
        n = round(rho * p["length_km"])
        est = pc.mc_percolation_estimate(p["lanes"], n, 1000.0 * p["length_km"], p["s_m"], p["trials"],
                                         derive_rng(p["seed"], i))
        rows.append([p["lanes"], n / p["length_km"], p["length_km"], p["s_m"], est.value, est.std_error, est.trials])
    return RunOutput(PROB_HEADER, rows)


@command("snapshot", [Param("input", str, None, "snapshot CSV (vehicle_id,lane,x_m[,hacked])", required=True),
                      Param("length_m", float, None, "road length (m); default just past the last vehicle"),
                      Param("fraction", _floats, [0.05, 0.1, 0.2, 0.3, 0.5], "hack fractions"),
                      Param("trials", int, 1000, "random hacks per fraction"),
                      *PERC, SEED, OUT],
         stochastic=True, help="blocking probability of random hacks on an observed snapshot")
def cmd_snapshot(p):
    snap = pc.load_snapshot(p["input"], p["length_m"])
    header = ["fraction", "n_hacked", "rho_H", "rho_H_per_lane", "predicted", "predicted_per_lane",
              "value", "std_error", "trials"]
    rows = []
    L_km = snap.L / 1000.0
    x = min(p["s_m"] / snap.L, 1.0)
    tuple_blocks = (x * (2.0 - x)) ** (snap.lanes - 1)
    for i, f in enumerate(p["fraction"]):
        est = pc.empirical_snapshot_blockage(snap, f, p["trials"], derive_rng(p["seed"], i), p["s_m"])
        dens = pc.snapshot_densities(snap, f)
        predicted = float(pc.percolation_probability(snap.lanes, dens["aggregate"], snap.L, p["s_m"], p["mode"]))
        if snap.lanes == 1:
            predicted_lane = predicted
        else:
            # unequal lanes: the number of candidate tuples is the product of per-lane counts
            tuples = float(np.prod([r * L_km for r in dens["per_lane"]]))
            predicted_lane = 0.0 if tuples == 0 else float(-np.expm1(tuples * np.log1p(-tuple_blocks)))
        rows.append([f, round(f * snap.n_vehicles), dens["aggregate"],
                     ";".join(fmt(r) for r in dens["per_lane"]), predicted, predicted_lane,
                     est.value, est.std_error, est.trials])
    return RunOutput(header, rows, inputs=[p["input"]])


RHO_GRID = [Param("rho_h", _floats, None, "explicit density grid (overrides min/max/step)"),
            Param("rho_min", float, 0.0, "density grid start"),
            Param("rho_max", float, 40.0, "density grid end"),
            Param("rho_step", float, 1.0, "density grid step")]


@command("city-sweep", [*GRAPH, *RHO_GRID, Param("replicates", int, 20, "prunings per density"),
                        *PERC, SEED, WORKERS, OUT],
         stochastic=True, help="largest / second-largest component sizes versus compromised density")
def cmd_city_sweep(p):
    out = RunOutput(["rho_H", "mean_largest", "std_largest", "mean_second", "std_second"], [])
    g = _graph(p, out)
    res = cg.sweep_density(g, _rho_grid(p), p["replicates"], p["s_m"], p["seed"], p["mode"], p["workers"])
    out.rows = [[r, a, b, c, d] for r, a, b, c, d in
                zip(res.rho_grid, res.mean_largest, res.std_largest, res.mean_second, res.std_second)]
    out.results = {"rho_critical": res.rho_critical, "n_nodes": g.n_nodes, "n_edges": g.n_edges}
    print(f"rho_critical = {fmt(res.rho_critical)} veh/km/lane")
    return out


@command("city-access", [*GRAPH, Param("services", str, None, "services CSV (category,node_id or category,x,y)",
                                       required=True),
                         *RHO_GRID, Param("replicates", int, 20, "prunings per density"),
                         *PERC, SEED, WORKERS, OUT],
         stochastic=True, help="fraction of intersections that can still reach each service")
def cmd_city_access(p):
    out = RunOutput(["rho_H", "category", "access_fraction"], [])
    g = _graph(p, out)
    out.inputs.append(p["services"])
    services = cg.load_services(p["services"], g)
    out.rows = [list(r) for r in cg.access_sweep(g, _rho_grid(p), p["replicates"], services, p["s_m"],
                                                   p["seed"], p["mode"], p["workers"])]
    return out


@command("city-heatmap", [*GRAPH,
                          Param("n_total", _floats, None, "total vehicles on the network", required=True),
                          Param("f", _floats, None, "compromised fractions", required=True),
                          Param("replicates", int, 50, "prunings per cell"),
                          Param("frag_ratio", float, 0.5, "fragmented when second >= ratio * largest"),
                          Param("d_m", float, pc.DEFAULT_VEHICLE_LENGTH, "vehicle length for capacity (m)"),
                          *PERC, SEED, WORKERS, OUT],
         stochastic=True, help="fragmentation probability over (total vehicles, compromised fraction)")
def cmd_city_heatmap(p):
    out = RunOutput(["N_total", "f", "rho_H", "frag_prob", "std_error"], [])
    g = _graph(p, out)
    cells = cg.fragmentation_heatmap(g, [int(round(n)) for n in p["n_total"]], p["f"], p["replicates"], p["s_m"],
                                     p["seed"], cg.SecondLargestRule(p["frag_ratio"]), p["mode"], p["d_m"],
                                     p["workers"])
    out.rows = [[c.N_total, c.f, c.rho_H, c.frag_prob, c.std_error] for row in cells for c in row]
    out.results = {"capacity": cg.network_capacity(g, p["d_m"]), "lane_km": g.lane_km}
    return out


@command("grid-gen", [Param("rows", int, 50, "grid rows"), Param("cols", int, 50, "grid columns"),
                      Param("length_min", float, 80.0, "street length lower bound (m)"),
                      Param("length_max", float, 200.0, "street length upper bound (m)"),
                      Param("lane_choices", _ints, [1, 2, 3], "lane counts sampled uniformly"),
                      Param("format", str, "csv", "output format: csv | graphml"),
                      SEED, OUT],
         stochastic=True, help="generate a rectangular street grid")
def cmd_grid_gen(p):
    if p["format"] not in ("csv", "graphml"):
        raise UsageError(f"unknown format {p['format']!r}")
    g = cg.generate_grid(p["rows"], p["cols"], (p["length_min"], p["length_max"]), p["lane_choices"], p["seed"])
    out = RunOutput([], [], results={"n_nodes": g.n_nodes, "n_edges": g.n_edges})
    out.write_main = lambda path: cg.save_graph(g, path, p["format"])
    return out


@command("capacity", [*GRAPH, Param("d_m", float, pc.DEFAULT_VEHICLE_LENGTH, "vehicle length (m)"), OUT],
         stochastic=False, help="bumper-to-bumper vehicle capacity of a street network")
def cmd_capacity(p):
    out = RunOutput(["total_lane_m", "d_m", "capacity"], [])
    g = _graph(p, out)
    out.rows.append([1000.0 * g.lane_km, p["d_m"], cg.network_capacity(g, p["d_m"])])
    return out


# ---------------------------------------------------------------------------
# execution


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def execute(config: ExperimentConfig) -> int:
    """Run a resolved config and write its CSV and manifest. Returns the exit status."""
    cmd = COMMANDS[config.command]
    params = dict(config.params)
    out_path = Path(params["out"])
    manifest_path = out_path.with_name(out_path.name + ".manifest.json")
    written: list[Path] = []
    try:
        result = cmd.run(params)
        targets = [(out_path, result.write_main or (lambda path: _write_csv(path, result.header, result.rows)))]
        targets += [(Path(name), writer) for name, writer in result.extra_files.items()]
        for path, writer in targets:
            tmp = path.with_name(path.name + ".tmp")
            written.append(tmp)
            writer(tmp)
            os.replace(tmp, path)
            written[-1] = path
        manifest = {
            "tool": "gridlock",
            "version": __version__,
            "command": config.command,
            "params": params,
            "inputs": {p: _digest(p) for p in result.inputs},
            "outputs": [str(p) for p in written],
            "results": result.results,
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except BaseException as exc:
        for p in written:
            p.unlink(missing_ok=True)
        if isinstance(exc, UsageError):
            log.error("%s", exc)
            return EXIT_USAGE
        if isinstance(exc, LoadError):
            log.error("input data error: %s", exc)
            return EXIT_DATA
        if isinstance(exc, (StabilityError, DomainError, ArithmeticError)):
            log.error("numerical error: %s", exc)
            return EXIT_NUMERIC
        raise
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    try:
        config = parse_config(argv)
    except UsageError as exc:
        print(f"gridlock: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return execute(config)


if __name__ == "__main__":
    sys.exit(main())
