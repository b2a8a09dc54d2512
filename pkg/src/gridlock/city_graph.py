"""City-scale fragmentation: streets blocked by disabled vehicles.

Every street (edge) is independently blocked with its road-level percolation
probability. The surviving street network is then analysed for connected
components, access to services and fragmentation.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._util import derive_rng, moving_average3, parallel_map
from .errors import DomainError, LoadError
from .percolation import (ALWAYS_BLOCKED, DEFAULT_BLOCKING_DISTANCE, DEFAULT_VEHICLE_LENGTH,
                          percolation_probability, percolation_prob_dL)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    length: float
    lanes: int


@dataclass(frozen=True, eq=False)
class CityGraph:
    """Street network; nodes are intersections, edges are street segments.

    ``u``/``v`` hold node indices into ``node_ids``. Arrays are read-only.
    """

    node_ids: tuple
    u: np.ndarray
    v: np.ndarray
    length: np.ndarray
    lanes: np.ndarray
    coords: np.ndarray | None = None
    directed: bool = False
    defaulted_lanes: int = 0
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        for name, dtype in (("u", np.int64), ("v", np.int64), ("length", np.float64), ("lanes", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.coords is not None:
            c = np.array(self.coords, dtype=float).reshape(len(self.node_ids), 2)
            c.setflags(write=False)
            object.__setattr__(self, "coords", c)
        n = len(self.node_ids)
        if not (self.u.size == self.v.size == self.length.size == self.lanes.size):
            raise DomainError("edge arrays differ in length")
        if self.u.size and (min(self.u.min(), self.v.min()) < 0 or max(self.u.max(), self.v.max()) >= n):
            raise DomainError("edge endpoint out of range")
        if self.length.size and not (self.length > 0).all():
            raise DomainError("edge lengths must be > 0")
        if self.lanes.size and not (self.lanes >= 1).all():
            raise DomainError("edges need at least one lane")
        object.__setattr__(self, "_index", {nid: i for i, nid in enumerate(self.node_ids)})
        if len(self._index) != n:
            raise DomainError("duplicate node ids")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return int(self.u.size)

    @property
    def lane_km(self) -> float:
        """Total lane length in km."""
        return float(np.sum(self.length * self.lanes)) / 1000.0

    def index(self, node_id) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            # ids read from text files are strings; fall back on a textual match
            key = str(node_id)
            for nid, i in self._index.items():
                if str(nid) == key:
                    return i
            raise

    def edge(self, i: int) -> Edge:
        return Edge(int(self.u[i]), int(self.v[i]), float(self.length[i]), int(self.lanes[i]))


# ---------------------------------------------------------------------------
# loading and generation

_NUMBER = re.compile(r"[-+]?\d+(?:\.\d*)?")


def _parse_lanes(raw: str, where: str) -> int:
    # OSM exports sometimes carry lists such as "['2', '3']"; take the largest value
    nums = _NUMBER.findall(str(raw))
    if not nums:
        raise LoadError(f"{where}: unreadable lanes value {raw!r}")
    lanes = max(int(float(x)) for x in nums)
    if lanes < 1:
        raise LoadError(f"{where}: lanes must be >= 1, got {raw!r}")
    return lanes


def _parse_length(raw, where: str) -> float:
    try:
        length = float(raw)
    except (TypeError, ValueError):
        raise LoadError(f"{where}: unreadable length {raw!r}") from None
    if not length > 0:
        raise LoadError(f"{where}: non-positive length {length}")
    return length


def _build(node_ids, coords, edges, directed, source, merge_reciprocal=True) -> CityGraph:
    index = {nid: i for i, nid in enumerate(node_ids)}
    u, v, length, lanes = [], [], [], []
    missing_lanes = 0
    unmatched = Counter()
    for rec, (a, b, raw_len, raw_lanes) in enumerate(edges):
        where = f"{source}: edge {rec} ({a}->{b})"
        if a not in index or b not in index:
            raise LoadError(f"{where}: unknown endpoint {a if a not in index else b!r}")
        L = _parse_length(raw_len, where)
        if raw_lanes is None or str(raw_lanes).strip() == "":
            missing_lanes += 1
            ln = 1
        else:
            ln = _parse_lanes(raw_lanes, where)
        ia, ib = index[a], index[b]
        if not directed and merge_reciprocal and ia != ib:
            # a two-way street exported as a pair of opposite directed records counts once
            back = (ib, ia, round(L, 6))
            if unmatched[back]:
                unmatched[back] -= 1
                continue
            unmatched[(ia, ib, round(L, 6))] += 1
        u.append(ia)
        v.append(ib)
        length.append(L)
        lanes.append(ln)
    if missing_lanes:
        log.warning("%s: %d edges without lane count, defaulted to 1", source, missing_lanes)
    return CityGraph(tuple(node_ids), u, v, length, lanes, coords, directed, missing_lanes)


def _load_graphml(path: Path, directed: bool) -> CityGraph:
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise LoadError(f"{path}: {exc}") from exc
    ns = ""
    if root.tag.startswith("{"):
        ns = root.tag[: root.tag.index("}") + 1]
    keys = {}
    for k in root.iter(f"{ns}key"):
        keys[k.get("id")] = (k.get("for"), k.get("attr.name"))
    graph = root.find(f"{ns}graph")
    if graph is None:
        raise LoadError(f"{path}: no <graph> element")
    source_directed = graph.get("edgedefault", "undirected") == "directed"
    node_ids, coords = [], []

    def data(el):
        out = {}
        for d in el.findall(f"{ns}data"):
            name = keys.get(d.get("key"), (None, d.get("key")))[1]
            out[name] = d.text
        return out

    have_coords = True
    for n in graph.findall(f"{ns}node"):
        nid = n.get("id")
        if nid is None:
            raise LoadError(f"{path}: node without id")
        node_ids.append(nid)
        attrs = data(n)
        try:
            coords.append((float(attrs["x"]), float(attrs["y"])))
        except (KeyError, TypeError, ValueError):
            have_coords = False
    edges = []
    for i, e in enumerate(graph.findall(f"{ns}edge")):
        attrs = data(e)
        if "length" not in attrs:
            raise LoadError(f"{path}: edge {i} ({e.get('source')}->{e.get('target')}) has no length")
        edges.append((e.get("source"), e.get("target"), attrs["length"], attrs.get("lanes")))
    return _build(node_ids, coords if have_coords and node_ids else None, edges, directed, str(path),
                  merge_reciprocal=source_directed)


def _load_csv(path: Path, nodes_path: Path | None, directed: bool) -> CityGraph:
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = {"u", "v", "length_m"} - set(header)
            if missing:
                raise LoadError(f"{path}: missing columns {sorted(missing)}")
            rows = [(r["u"], r["v"], r["length_m"], r.get("lanes")) for r in reader]
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    coords = None
    if nodes_path is not None:
        try:
            with Path(nodes_path).open(newline="") as fh:
                nrows = list(csv.DictReader(fh))
        except OSError as exc:
            raise LoadError(f"cannot read {nodes_path}: {exc}") from exc
        node_ids = [r["node_id"] for r in nrows]
        if nrows and "x" in nrows[0] and "y" in nrows[0]:
            coords = [(float(r["x"]), float(r["y"])) for r in nrows]
    else:
        node_ids = list(dict.fromkeys(x for r in rows for x in r[:2]))
    return _build(node_ids, coords, rows, directed, str(path))


def load_graph(path: str | Path, directed: bool = False, nodes_path: str | Path | None = None) -> CityGraph:
    """Read a street network from GraphML or a ``u,v,length_m,lanes`` CSV edge list.

    GraphML edges need a ``length`` attribute (metres) and may carry ``lanes``;
    nodes may carry ``x``/``y``. A CSV edge list can be paired with a
    ``node_id,x,y`` node file, in which case edges naming other nodes are
    rejected. Missing lane counts default to 1.
    """
    path = Path(path)
    if path.suffix.lower() in (".graphml", ".xml"):
        return _load_graphml(path, directed)
    if path.suffix.lower() in (".csv", ".txt"):
        return _load_csv(path, Path(nodes_path) if nodes_path else None, directed)
    raise LoadError(f"{path}: unsupported graph format (use .graphml or .csv)")


def save_graph(graph: CityGraph, path: str | Path, format: str | None = None) -> None:
    """Write ``graph`` as GraphML or a CSV edge list (format defaults to the file suffix)."""
    path = Path(path)
    format = format or ("graphml" if path.suffix.lower() == ".graphml" else "csv")
    if format == "graphml":
        ET.register_namespace("", "http://graphml.graphdrawing.org/xmlns")
        ns = "{http://graphml.graphdrawing.org/xmlns}"
        root = ET.Element(f"{ns}graphml")
        for kid, target, name, typ in (("d0", "node", "x", "double"), ("d1", "node", "y", "double"),
                                       ("d2", "edge", "length", "double"), ("d3", "edge", "lanes", "int")):
            ET.SubElement(root, f"{ns}key", {"id": kid, "for": target, "attr.name": name, "attr.type": typ})
        g = ET.SubElement(root, f"{ns}graph",
                          {"id": "G", "edgedefault": "directed" if graph.directed else "undirected"})
        for i, nid in enumerate(graph.node_ids):
            n = ET.SubElement(g, f"{ns}node", {"id": str(nid)})
            if graph.coords is not None:
                ET.SubElement(n, f"{ns}data", {"key": "d0"}).text = repr(float(graph.coords[i, 0]))
                ET.SubElement(n, f"{ns}data", {"key": "d1"}).text = repr(float(graph.coords[i, 1]))
        for i in range(graph.n_edges):
            e = ET.SubElement(g, f"{ns}edge", {"source": str(graph.node_ids[graph.u[i]]),
                                               "target": str(graph.node_ids[graph.v[i]])})
            ET.SubElement(e, f"{ns}data", {"key": "d2"}).text = repr(float(graph.length[i]))
            ET.SubElement(e, f"{ns}data", {"key": "d3"}).text = str(int(graph.lanes[i]))
        ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    else:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "v", "length_m", "lanes"])
            for i in range(graph.n_edges):
                w.writerow([graph.node_ids[graph.u[i]], graph.node_ids[graph.v[i]],
                            f"{graph.length[i]:.9g}", int(graph.lanes[i])])


def generate_grid(rows: int, cols: int, edge_length: float | tuple[float, float] = 100.0,
                  lanes_distribution: Mapping[int, float] | Sequence[int] = (1, 2, 3),
                  seed: int = 0) -> CityGraph:
    """Rectangular street lattice.

    ``edge_length`` is a constant or a ``(low, high)`` range sampled uniformly
    per edge. ``lanes_distribution`` maps lane counts to weights, or lists lane
    counts to sample uniformly.
    """
    if rows < 2 or cols < 2:
        raise DomainError("grid needs at least 2 rows and 2 columns")
    rng = np.random.default_rng(seed)
    ids = np.arange(rows * cols).reshape(rows, cols)
    u = np.concatenate([ids[:, :-1].ravel(), ids[:-1, :].ravel()])
    v = np.concatenate([ids[:, 1:].ravel(), ids[1:, :].ravel()])
    m = u.size
    if isinstance(lanes_distribution, Mapping):
        values = np.array(list(lanes_distribution.keys()), dtype=int)
        weights = np.array(list(lanes_distribution.values()), dtype=float)
        weights = weights / weights.sum()
    else:
        values = np.array(list(lanes_distribution), dtype=int)
        weights = None
    lanes = rng.choice(values, size=m, p=weights)
    if np.ndim(edge_length) == 0:
        length = np.full(m, float(edge_length))
        spacing = float(edge_length)
    else:
        lo, hi = edge_length
        length = rng.uniform(lo, hi, size=m)
        spacing = (lo + hi) / 2.0
    r, c = np.divmod(np.arange(rows * cols), cols)
    coords = np.column_stack([c * spacing, r * spacing])
    return CityGraph(tuple(range(rows * cols)), u, v, length, lanes, coords)


# ---------------------------------------------------------------------------
# pruning and components


def edge_block_prob(edge: Edge, rho_H: float, s: float = DEFAULT_BLOCKING_DISTANCE,
                    mode: str = ALWAYS_BLOCKED) -> float:
    """Blocking probability of one street at compromised density ``rho_H``."""
    if rho_H < 0:
        raise DomainError("rho_H must be >= 0")
    return float(_block_probs(np.array([edge.lanes]), np.array([edge.length]), rho_H, s, mode)[0])


def _block_probs(lanes, length, rho_H, s, mode):
    # streets shorter than s: every adjacent-lane pair is within s of each other
    eff = np.maximum(length, s)
    p = percolation_probability(lanes, rho_H * length / eff, eff, s, mode)
    return p


def edge_block_probs(graph: CityGraph, rho_H: float, s: float = DEFAULT_BLOCKING_DISTANCE,
                     mode: str = ALWAYS_BLOCKED) -> np.ndarray:
    if rho_H < 0:
        raise DomainError("rho_H must be >= 0")
    return _block_probs(graph.lanes, graph.length, rho_H, s, mode)


def component_labels(graph: CityGraph, blocked: np.ndarray | None = None) -> np.ndarray:
    keep = np.ones(graph.n_edges, bool) if blocked is None else ~np.asarray(blocked, bool)
    n = graph.n_nodes
    adj = coo_matrix((np.ones(int(keep.sum())), (graph.u[keep], graph.v[keep])), shape=(n, n))
    _, labels = connected_components(adj, directed=graph.directed, connection="strong")
    return labels


def component_sizes(graph: CityGraph, blocked: np.ndarray | None = None) -> list[int]:
    """Node counts of the connected components left after removing ``blocked`` edges, largest first."""
    if graph.n_nodes == 0:
        return []
    sizes = np.bincount(component_labels(graph, blocked))
    return sorted((int(x) for x in sizes), reverse=True)


def top_two(sizes: Sequence[int]) -> tuple[int, int]:
    first = sizes[0] if sizes else 0
    second = sizes[1] if len(sizes) > 1 else 0
    return first, second


@dataclass(frozen=True)
class PruneOutcome:
    blocked: np.ndarray
    sizes: list[int]
    seed: int | None = None

    @property
    def blocked_edges(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.blocked).tolist())


def prune_network(graph: CityGraph, rho_H: float, s: float = DEFAULT_BLOCKING_DISTANCE, rng=None,
                  mode: str = ALWAYS_BLOCKED) -> PruneOutcome:
    """Block each street independently with its percolation probability."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    p = edge_block_probs(graph, rho_H, s, mode)
    blocked = gen.random(graph.n_edges) < p
    return PruneOutcome(blocked, component_sizes(graph, blocked), seed)


def _master_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    if rng is None:
        raise DomainError("an explicit seed is required")
    return int(rng)


@dataclass(frozen=True)
class SweepResult:
    rho_grid: np.ndarray
    mean_largest: np.ndarray
    std_largest: np.ndarray
    mean_second: np.ndarray
    std_second: np.ndarray
    replicates: int
    rho_critical: float
    n_nodes: int

    @property
    def smoothed_second(self) -> np.ndarray:
        return moving_average3(self.mean_second)


def _sweep_point(job):
    graph, i, rho, replicates, s, seed, mode = job
    out = np.empty((replicates, 2))
    for r in range(replicates):
        res = prune_network(graph, rho, s, derive_rng(seed, i, r), mode)
        out[r] = top_two(res.sizes)
    return out


def _std(x):
    return x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])


def critical_density(rho_grid: Sequence[float], mean_second: Sequence[float]) -> float:
    """Grid density where the smoothed mean second-largest component peaks."""
    return float(np.asarray(rho_grid, float)[int(np.argmax(moving_average3(mean_second)))])


def sweep_density(graph: CityGraph, rho_grid: Sequence[float], replicates: int,
                  s: float = DEFAULT_BLOCKING_DISTANCE, rng=None, mode: str = ALWAYS_BLOCKED,
                  workers: int = 1) -> SweepResult:
    """Largest and second-largest component sizes over a grid of compromised densities.

    Replicate ``r`` at grid point ``i`` uses the stream derived from
    ``(seed, i, r)``.
    """
    grid = np.asarray(rho_grid, dtype=float)
    if grid.size == 0:
        raise DomainError("empty density grid")
    if replicates < 1:
        raise DomainError("replicates must be >= 1")
    seed = _master_seed(rng)
    jobs = [(graph, i, float(rho), replicates, s, seed, mode) for i, rho in enumerate(grid)]
    per_point = parallel_map(_sweep_point, jobs, workers)
    largest = np.array([p[:, 0] for p in per_point]).T
    second = np.array([p[:, 1] for p in per_point]).T
    mean_second = second.mean(axis=0)
    return SweepResult(grid, largest.mean(axis=0), _std(largest), mean_second, _std(second),
                       replicates, critical_density(grid, mean_second), graph.n_nodes)


def is_unimodal(values: Sequence[float], tolerance: float | Sequence[float] = 0.0) -> bool:
    """True if ``values`` rise to one peak and then fall, ignoring dips up to ``tolerance``."""
    y = np.asarray(values, float)
    tol = np.broadcast_to(np.asarray(tolerance, float), y.shape)
    k = int(np.argmax(y))
    # running max before the peak / running min after it
    rising_ok = all(y[i] >= np.max(y[: i + 1]) - tol[i] for i in range(k + 1))
    falling_ok = all(y[i] <= np.min(y[k: i + 1]) + tol[i] for i in range(k, y.size))
    return rising_ok and falling_ok


# ---------------------------------------------------------------------------
# services


@dataclass(frozen=True)
class ServiceMap:
    """Category name to the set of node indices offering that service."""

    categories: dict

    def validate(self, graph: CityGraph) -> "ServiceMap":
        for cat, nodes in self.categories.items():
            bad = [n for n in nodes if not 0 <= n < graph.n_nodes]
            if bad:
                raise DomainError(f"service category {cat!r} references unknown nodes {bad[:5]}")
        return self


def load_services(path: str | Path, graph: CityGraph) -> ServiceMap:
    """Read ``category,node_id`` or ``category,x,y`` rows (coordinates snap to the nearest node)."""
    path = Path(path)
    cats: dict[str, set[int]] = {}
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = set(reader.fieldnames or [])
            by_id = {"category", "node_id"} <= header
            by_xy = {"category", "x", "y"} <= header
            if not (by_id or by_xy):
                raise LoadError(f"{path}: need columns category,node_id or category,x,y")
            if by_xy and not by_id and graph.coords is None:
                raise LoadError(f"{path}: graph has no coordinates to snap services to")
            for lineno, row in enumerate(reader, start=2):
                if by_id:
                    try:
                        idx = graph.index(row["node_id"])
                    except KeyError:
                        raise LoadError(f"{path}:{lineno}: unknown node {row['node_id']!r}") from None
                else:
                    try:
                        p = np.array([float(row["x"]), float(row["y"])])
                    except (TypeError, ValueError):
                        raise LoadError(f"{path}:{lineno}: bad coordinates") from None
                    idx = int(np.argmin(((graph.coords - p) ** 2).sum(axis=1)))
                cats.setdefault(row["category"], set()).add(idx)
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return ServiceMap({k: frozenset(v) for k, v in cats.items()})


def service_accessibility(graph: CityGraph, blocked: np.ndarray | None,
                          services: ServiceMap) -> dict[str, float]:
    """Fraction of nodes sharing a component with at least one node of each service category."""
    labels = component_labels(graph, blocked)
    sizes = np.bincount(labels, minlength=labels.max() + 1 if labels.size else 0)
    out = {}
    for cat, nodes in services.categories.items():
        if not nodes:
            log.warning("service category %r has no nodes", cat)
            out[cat] = 0.0
            continue
        comps = np.unique(labels[np.fromiter(nodes, dtype=np.int64)])
        out[cat] = float(sizes[comps].sum()) / graph.n_nodes
    return out


def _access_point(job):
    graph, i, rho, replicates, s, seed, mode, services = job
    acc = {c: 0.0 for c in services.categories}
    for r in range(replicates):
        res = prune_network(graph, rho, s, derive_rng(seed, i, r), mode)
        for c, val in service_accessibility(graph, res.blocked, services).items():
            acc[c] += val
    return {c: v / replicates for c, v in acc.items()}


def access_sweep(graph: CityGraph, rho_grid: Sequence[float], replicates: int, services: ServiceMap,
                 s: float = DEFAULT_BLOCKING_DISTANCE, rng=None, mode: str = ALWAYS_BLOCKED,
                 workers: int = 1) -> list[tuple[float, str, float]]:
    """Mean access fraction per (density, category)."""
    services.validate(graph)
    seed = _master_seed(rng)
    jobs = [(graph, i, float(rho), replicates, s, seed, mode, services) for i, rho in enumerate(rho_grid)]
    rows = []
    for (_, _, rho, *_), res in zip(jobs, parallel_map(_access_point, jobs, workers)):
        rows.extend((rho, c, res[c]) for c in sorted(res))
    return rows


# ---------------------------------------------------------------------------
# city-wide risk


def network_capacity(graph: CityGraph, d: float = DEFAULT_VEHICLE_LENGTH) -> int:
    """Vehicles that fit bumper to bumper on every lane of every street."""
    if not d > 0:
        raise DomainError("vehicle length must be > 0")
    return int(math.floor(float(np.sum(graph.length * graph.lanes)) / d + 1e-9))


@dataclass(frozen=True)
class SecondLargestRule:
    """Fragmented when the runner-up component has at least ``ratio`` times the largest's nodes."""

    ratio: float = 0.5

    def __call__(self, sizes: Sequence[int]) -> bool:
        first, second = top_two(sizes)
        return first > 0 and second >= self.ratio * first


@dataclass(frozen=True)
class HeatmapCell:
    N_total: int
    f: float
    rho_H: float
    frag_prob: float
    std_error: float


def _heatmap_cell(job):
    graph, i, j, N, f, rho, replicates, s, seed, mode, rule = job
    hits = 0
    for r in range(replicates):
        res = prune_network(graph, rho, s, derive_rng(seed, i, j, r), mode)
        hits += bool(rule(res.sizes))
    p = hits / replicates
    return HeatmapCell(int(N), float(f), rho, p, math.sqrt(p * (1 - p) / replicates))


def fragmentation_heatmap(graph: CityGraph, N_grid: Sequence[int], f_grid: Sequence[float], replicates: int,
                          s: float = DEFAULT_BLOCKING_DISTANCE, rng=None,
                          frag_rule: Callable[[Sequence[int]], bool] | None = None,
                          mode: str = ALWAYS_BLOCKED, d: float = DEFAULT_VEHICLE_LENGTH,
                          workers: int = 1) -> list[list[HeatmapCell]]:
    """Fragmentation probability for each (total vehicles, compromised fraction) cell.

    The compromised density of a cell is ``N_total * f`` spread over the
    network's lane-km. Returns rows indexed by ``N_grid``.
    """
    if replicates < 1:
        raise DomainError("replicates must be >= 1")
    cap = network_capacity(graph, d)
    for N in N_grid:
        if N > cap:
            raise DomainError(f"N_total={N} exceeds network capacity {cap}")
    for f in f_grid:
        if not 0.0 <= f <= 1.0:
            raise DomainError(f"compromised fraction {f} outside [0, 1]")
    rule = frag_rule or SecondLargestRule(0.5)
    seed = _master_seed(rng)
    lane_km = graph.lane_km
    jobs = [(graph, i, j, N, f, N * f / lane_km, replicates, s, seed, mode, rule)
            for i, N in enumerate(N_grid) for j, f in enumerate(f_grid)]
    cells = parallel_map(_heatmap_cell, jobs, workers)
    w = len(f_grid)
    return [cells[i * w:(i + 1) * w] for i in range(len(N_grid))]


def intersection_correction(L: float, lanes: int, rho_H: float, s: float = DEFAULT_BLOCKING_DISTANCE,
                            l0: float = 0.0, mode: str = ALWAYS_BLOCKED) -> float:
    """Extra blocking probability from an intersection of length ``l0`` at the end of a street of length ``L``."""
    if l0 < 0:
        raise DomainError("intersection length must be >= 0")
    if l0 == 0:
        return 0.0
    return percolation_prob_dL(lanes, rho_H, L, s, mode) * l0
