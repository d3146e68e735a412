"""Road-network model: grid generation, file I/O, Z-order ids, shortest paths and hubs."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

FORMAT_VERSION = 1


class NetworkError(ValueError):
    """Raised for malformed networks and failed graph queries."""


class LoadError(NetworkError):
    pass


class NoPathError(NetworkError):
    pass


class EncodingCollisionError(NetworkError):
    pass


class HubConnectivityError(NetworkError):
    pass


@dataclass(frozen=True)
class Intersection:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Road:
    id: int
    head: int
    tail: int
    length: float
    lanes: int
    free_flow_speed: float
    allowed_next: tuple[int, ...] = ()

    @property
    def free_flow_time(self) -> float:
        return self.length / self.free_flow_speed


@dataclass(frozen=True)
class RoadNetwork:
    intersections: tuple[Intersection, ...]
    roads: tuple[Road, ...]

    def __post_init__(self):
        validate_network(self)

    @property
    def n_intersections(self) -> int:
        return len(self.intersections)

    @property
    def n_roads(self) -> int:
        return len(self.roads)

    @cached_property
    def out_roads(self) -> tuple[tuple[int, ...], ...]:
        """Outgoing road ids per intersection, ascending."""
        out: list[list[int]] = [[] for _ in self.intersections]
        for r in self.roads:
            out[r.head].append(r.id)
        return tuple(tuple(sorted(o)) for o in out)

    @cached_property
    def in_roads(self) -> tuple[tuple[int, ...], ...]:
        inc: list[list[int]] = [[] for _ in self.intersections]
        for r in self.roads:
            inc[r.tail].append(r.id)
        return tuple(tuple(sorted(o)) for o in inc)

    @cached_property
    def max_out_degree(self) -> int:
        return max(len(o) for o in self.out_roads)

    @cached_property
    def controlled(self) -> tuple[bool, ...]:
        """Intersections where at least one incoming road offers a real choice."""
        return tuple(
            any(len(self.roads[r].allowed_next) >= 2 for r in self.in_roads[i])
            for i in range(self.n_intersections)
        )

    @cached_property
    def coords(self) -> np.ndarray:
        return np.array([[n.x, n.y] for n in self.intersections], dtype=float)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([r.length for r in self.roads], dtype=float)

    @cached_property
    def free_speeds(self) -> np.ndarray:
        return np.array([r.free_flow_speed for r in self.roads], dtype=float)

    @cached_property
    def lane_counts(self) -> np.ndarray:
        return np.array([r.lanes for r in self.roads], dtype=float)

    @cached_property
    def free_flow_times(self) -> np.ndarray:
        return self.lengths / self.free_speeds

    @cached_property
    def heads(self) -> np.ndarray:
        return np.array([r.head for r in self.roads], dtype=np.int64)

    @cached_property
    def tails(self) -> np.ndarray:
        return np.array([r.tail for r in self.roads], dtype=np.int64)

    @cached_property
    def road_to_dest_free_flow(self) -> np.ndarray:
        """[M, N] free-flow time from the tail of road r to intersection d (turn-restricted)."""
        out = np.empty((self.n_roads, self.n_intersections))
        w = self.free_flow_times
        for r in range(self.n_roads):
            out[r] = _road_source_times(self, w, r)
        return out

    @cached_property
    def intersection_free_flow(self) -> np.ndarray:
        """[N, N] free-flow time between intersections (any first road allowed)."""
        return np.stack([
            intersection_times(self, self.free_flow_times, i) for i in range(self.n_intersections)
        ])

    @cached_property
    def line_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(from, to) road pairs of every permitted turn."""
        pairs = [(r.id, n) for r in self.roads for n in sorted(r.allowed_next)]
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]

    def slot_of(self, intersection: int, road: int) -> int:
        """Index of `road` among the ascending outgoing roads of `intersection`."""
        return self.out_roads[intersection].index(road)


def validate_network(net: RoadNetwork) -> None:
    n = len(net.intersections)
    for k, node in enumerate(net.intersections):
        if node.id != k:
            raise NetworkError(f"intersection ids must be dense: position {k} has id {node.id}")
        if not (math.isfinite(node.x) and math.isfinite(node.y)) or node.x < 0 or node.y < 0:
            raise NetworkError(f"intersection {k}: coordinates must be finite and non-negative")
    for k, r in enumerate(net.roads):
        if r.id != k:
            raise NetworkError(f"road ids must be dense: position {k} has id {r.id}")
        if not (0 <= r.head < n and 0 <= r.tail < n):
            raise NetworkError(f"road {k}: dangling endpoint")
        if r.head == r.tail:
            raise NetworkError(f"road {k}: self-loop")
        if not r.length > 0:
            raise NetworkError(f"road {k}: non-positive length")
        if r.lanes < 1:
            raise NetworkError(f"road {k}: lanes must be >= 1")
        if not r.free_flow_speed > 0:
            raise NetworkError(f"road {k}: non-positive free-flow speed")
    for r in net.roads:
        for nxt in r.allowed_next:
            if not 0 <= nxt < len(net.roads):
                raise NetworkError(f"road {r.id}: allowed_next references missing road {nxt}")
            if net.roads[nxt].head != r.tail:
                raise NetworkError(f"road {r.id}: allowed_next road {nxt} does not start at its tail")


def default_allowed_next(heads: Sequence[int], tails: Sequence[int]) -> list[tuple[int, ...]]:
    """All roads leaving each road's tail, minus the U-turn unless it is the only exit."""
    out: dict[int, list[int]] = {}
    for rid, h in enumerate(heads):
        out.setdefault(h, []).append(rid)
    result = []
    for rid, (h, t) in enumerate(zip(heads, tails)):
        exits = sorted(out.get(t, []))
        if len(exits) > 1:
            exits = [e for e in exits if tails[e] != h]
        result.append(tuple(exits))
    return result


def make_network(points: Sequence[tuple[float, float]], links: Sequence[tuple[int, int]],
                 speed: float = 13.89, lanes: int = 1,
                 lengths: Sequence[float] | None = None) -> RoadNetwork:
    """Network from coordinates and directed links; lengths default to Euclidean."""
    nodes = tuple(Intersection(i, float(x), float(y)) for i, (x, y) in enumerate(points))
    heads = [h for h, _ in links]
    tails = [t for _, t in links]
    allowed = default_allowed_next(heads, tails)
    roads = []
    for rid, (h, t) in enumerate(links):
        if lengths is None:
            length = math.dist(points[h], points[t])
        else:
            length = float(lengths[rid])
        roads.append(Road(rid, h, t, length, lanes, speed, allowed[rid]))
    return RoadNetwork(nodes, tuple(roads))


def build_grid(rows: int, cols: int, edge_len: float = 200.0, speed: float = 13.89,
               lanes: int = 2) -> RoadNetwork:
    """Manhattan grid with a road in each direction on every lattice edge.

    Intersection ``r * cols + c`` sits at ``(c * edge_len, r * edge_len)``.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    if edge_len <= 0:
        raise ValueError("edge_len must be positive")
    points = [(c * edge_len, r * edge_len) for r in range(rows) for c in range(cols)]
    links = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    links.append((i, rr * cols + cc))
    return make_network(points, links, speed=speed, lanes=lanes,
                        lengths=[edge_len] * len(links))


# ---------------------------------------------------------------- file format

def network_to_dict(net: RoadNetwork) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "intersections": [{"id": n.id, "x": n.x, "y": n.y} for n in net.intersections],
        "roads": [
            {"id": r.id, "head": r.head, "tail": r.tail, "length": r.length, "lanes": r.lanes,
             "free_flow_speed": r.free_flow_speed, "allowed_next": list(r.allowed_next)}
            for r in net.roads
        ],
    }


def save_network(net: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1))


def network_from_dict(doc: dict) -> RoadNetwork:
    if doc.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported format_version {doc.get('format_version')!r}")
    try:
        nodes = tuple(Intersection(int(n["id"]), float(n["x"]), float(n["y"]))
                      for n in doc["intersections"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"intersections: bad record ({exc})") from exc
    roads = []
    for k, rec in enumerate(doc.get("roads", [])):
        try:
            roads.append(Road(int(rec["id"]), int(rec["head"]), int(rec["tail"]),
                              float(rec["length"]), int(rec["lanes"]),
                              float(rec["free_flow_speed"]),
                              tuple(int(x) for x in rec["allowed_next"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"roads[{k}]: bad field ({exc})") from exc
    try:
        return RoadNetwork(nodes, tuple(roads))
    except LoadError:
        raise
    except NetworkError as exc:
        raise LoadError(str(exc)) from exc


def load_network(path: str | Path) -> RoadNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    try:
        return network_from_dict(doc)
    except LoadError as exc:
        raise LoadError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- queries

def next_hops(net: RoadNetwork, r: int) -> list[int]:
    return sorted(net.roads[r].allowed_next)


# ---------------------------------------------------------------- Z-order

def int_to_bits(value: int, nbits: int) -> list[int]:
    """Big-endian binary digits of ``value`` padded to ``nbits``."""
    if value < 0 or value >= 1 << nbits:
        raise ValueError(f"{value} does not fit in {nbits} bits")
    return [(value >> (nbits - 1 - k)) & 1 for k in range(nbits)]


def interleave(cx: int, cy: int, bits_per_axis: int) -> int:
    """Morton code with the y bit ahead of the x bit at every level."""
    code = 0
    for level in range(bits_per_axis - 1, -1, -1):
        code = (code << 1) | ((cy >> level) & 1)
        code = (code << 1) | ((cx >> level) & 1)
    return code


def quantize(net: RoadNetwork, bits_per_axis: int) -> np.ndarray:
    """Cell coordinates of every intersection on a 2^b x 2^b grid over the bounding box."""
    cells = 1 << bits_per_axis
    xy = net.coords
    lo = xy.min(axis=0)
    span = xy.max(axis=0) - lo
    out = np.zeros_like(xy, dtype=np.int64)
    for ax in range(2):
        if span[ax] > 0:
            out[:, ax] = np.minimum(cells - 1, np.floor((xy[:, ax] - lo[ax]) / span[ax] * cells))
    return out


def zorder_codes(net: RoadNetwork, bits_per_axis: int) -> list[int]:
    if bits_per_axis < 1:
        raise ValueError("bits_per_axis must be >= 1")
    cells = quantize(net, bits_per_axis)
    codes = [interleave(int(cx), int(cy), bits_per_axis) for cx, cy in cells]
    if len(set(codes)) != len(codes):
        raise EncodingCollisionError(f"intersections share a cell at {bits_per_axis} bits/axis")
    return codes


def zorder_id(net: RoadNetwork, i: int, bits_per_axis: int) -> list[int]:
    return int_to_bits(zorder_codes(net, bits_per_axis)[i], 2 * bits_per_axis)


def min_zorder_bits(net: RoadNetwork, limit: int = 16) -> int:
    """Smallest bits-per-axis giving collision-free cells."""
    for b in range(1, limit + 1):
        try:
            zorder_codes(net, b)
            return b
        except EncodingCollisionError:
            continue
    raise EncodingCollisionError(f"no collision-free quantization up to {limit} bits")


def zorder_matrix(net: RoadNetwork, bits_per_axis: int | None = None) -> np.ndarray:
    """[N, 2b] float matrix of Z-order bit vectors."""
    b = min_zorder_bits(net) if bits_per_axis is None else bits_per_axis
    codes = zorder_codes(net, b)
    return np.array([int_to_bits(c, 2 * b) for c in codes], dtype=float)


# ---------------------------------------------------------------- shortest paths

def shortest_path(net: RoadNetwork, weights: Sequence[float], src: int, dst: int) -> list[int]:
    """Minimum-weight road sequence from ``src``'s tail to ``dst`` obeying allowed_next.

    Equal-cost paths resolve to the lexicographically smallest road-id sequence;
    with positive weights no optimal path is a prefix of another optimal path to
    the same road, so ordering the heap by (cost, path) settles each road on it.
    """
    if net.roads[src].tail == dst:
        return []
    heap: list[tuple[float, tuple[int, ...]]] = []
    for nxt in net.roads[src].allowed_next:
        heapq.heappush(heap, (float(weights[nxt]), (nxt,)))
    settled: set[int] = set()
    while heap:
        cost, path = heapq.heappop(heap)
        r = path[-1]
        if r in settled:
            continue
        settled.add(r)
        if net.roads[r].tail == dst:
            return list(path)
        for nxt in net.roads[r].allowed_next:
            if nxt not in settled:
                heapq.heappush(heap, (cost + float(weights[nxt]), path + (nxt,)))
    raise NoPathError(f"intersection {dst} unreachable from road {src}")


def path_cost(weights: Sequence[float], path: Sequence[int]) -> float:
    return float(sum(weights[r] for r in path))


def _settle_roads(net: RoadNetwork, weights, starts: list[tuple[float, int]]) -> np.ndarray:
    """Dijkstra over road states; returns min arrival cost at each road's tail."""
    best = np.full(net.n_roads, np.inf)
    heap = list(starts)
    heapq.heapify(heap)
    while heap:
        cost, r = heapq.heappop(heap)
        if cost >= best[r]:
            continue
        best[r] = cost
        for nxt in net.roads[r].allowed_next:
            c = cost + weights[nxt]
            if c < best[nxt]:
                heapq.heappush(heap, (c, nxt))
    return best


def _road_source_times(net: RoadNetwork, weights, src: int) -> np.ndarray:
    best = _settle_roads(net, weights, [(float(weights[n]), n) for n in net.roads[src].allowed_next])
    out = np.full(net.n_intersections, np.inf)
    np.minimum.at(out, net.tails, best)
    out[net.roads[src].tail] = 0.0
    return out


def intersection_times(net: RoadNetwork, weights, src: int) -> np.ndarray:
    """Min travel time from intersection ``src`` to every intersection."""
    best = _settle_roads(net, weights, [(float(weights[r]), r) for r in net.out_roads[src]])
    out = np.full(net.n_intersections, np.inf)
    np.minimum.at(out, net.tails, best)
    out[src] = 0.0
    return out


def intersection_times_many(net: RoadNetwork, weights, sources: Sequence[int]) -> np.ndarray:
    """[len(sources), N] min travel times, same semantics as ``intersection_times``.

    Runs one compiled Dijkstra over the turn graph with a virtual start node per source.
    """
    M, S = net.n_roads, len(sources)
    w = np.asarray(weights, dtype=float)
    frm, to = net.line_edges
    src_rows = [M + i for i, s in enumerate(sources) for _ in net.out_roads[s]]
    src_cols = [r for s in sources for r in net.out_roads[s]]
    rows = np.concatenate([frm, np.array(src_rows, dtype=np.int64)])
    cols = np.concatenate([to, np.array(src_cols, dtype=np.int64)])
    graph = csr_matrix((w[cols], (rows, cols)), shape=(M + S, M + S))
    dist = dijkstra(graph, directed=True, indices=np.arange(M, M + S))[:, :M]
    out = np.full((S, net.n_intersections), np.inf)
    for i in range(S):
        np.minimum.at(out[i], net.tails, dist[i])
        out[i, sources[i]] = 0.0
    return out


def intersection_path(net: RoadNetwork, weights, src: int, dst: int) -> list[int]:
    """Cheapest road sequence between intersections (first road unrestricted)."""
    if src == dst:
        return []
    best: tuple[float, list[int]] | None = None
    for r in net.out_roads[src]:
        try:
            tail = [] if net.roads[r].tail == dst else shortest_path(net, weights, r, dst)
        except NoPathError:
            continue
        cand = (weights[r] + path_cost(weights, tail), [r] + tail)
        if best is None or cand < best:
            best = cand
    if best is None:
        raise NoPathError(f"intersection {dst} unreachable from intersection {src}")
    return best[1]


def is_strongly_connected(n: int, adjacency: dict[int, Sequence[int]]) -> bool:
    def reach(adj):
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == n

    if n == 0:
        return True
    rev: dict[int, list[int]] = {}
    for u, vs in adjacency.items():
        for v in vs:
            rev.setdefault(v, []).append(u)
    return reach(adjacency) and reach(rev)


def network_adjacency(net: RoadNetwork) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {}
    for r in net.roads:
        adj.setdefault(r.head, []).append(r.tail)
    return adj


# ---------------------------------------------------------------- hubs

@dataclass(frozen=True)
class HubGraph:
    hubs: tuple[int, ...]
    edges: tuple[tuple[tuple[int, float], ...], ...]
    """Per hub index: (neighbor hub index, free-flow time) ordered nearest first."""
    r_vic: float
    d_max: float

    @property
    def k(self) -> int:
        return len(self.hubs)

    def neighbors(self, k: int) -> list[int]:
        return [j for j, _ in self.edges[k]]


def filter_hub_candidates(net: RoadNetwork) -> list[int]:
    return [i for i in range(net.n_intersections)
            if len(net.in_roads[i]) >= 3 and len(net.out_roads[i]) >= 3]


def medoid_cost(dist: np.ndarray, medoids: Sequence[int]) -> float:
    """Sum over rows of the distance to the nearest medoid column."""
    return float(dist[:, list(medoids)].min(axis=1).sum())


@dataclass
class PamResult:
    medoids: list[int]
    cost: float
    history: list[float] = field(default_factory=list)


def pam(dist: np.ndarray, k: int, seed: int = 0, restarts: int = 8,
        max_iter: int = 100) -> PamResult:
    """K-medoids over a square distance matrix: greedy BUILD then best-swap descent.

    Extra seeded random starts guard against swap local optima; the lowest-cost
    run wins and ties keep the earliest run.
    """
    n = dist.shape[0]
    if k > n or k < 1:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)

    build: list[int] = []
    for _ in range(k):
        rest = [c for c in range(n) if c not in build]
        build.append(min(rest, key=lambda c: (medoid_cost(dist, build + [c]), c)))
    starts = [build] + [sorted(rng.choice(n, size=k, replace=False).tolist())
                        for _ in range(restarts)]

    best: PamResult | None = None
    for start in starts:
        med = list(start)
        cost = medoid_cost(dist, med)
        history = [cost]
        for _ in range(max_iter):
            swap = None
            for pos in range(k):
                for cand in range(n):
                    if cand in med:
                        continue
                    trial = med.copy()
                    trial[pos] = cand
                    c = medoid_cost(dist, trial)
                    if c < cost - 1e-12 and (swap is None or c < swap[0]):
                        swap = (c, trial)
            if swap is None:
                break
            cost, med = swap
            history.append(cost)
        if best is None or cost < best.cost - 1e-12:
            best = PamResult(sorted(med), cost, history)
    return best


def select_hubs(net: RoadNetwork, candidates: Sequence[int], k: int, seed: int = 0) -> list[int]:
    if k > len(candidates):
        raise ValueError(f"cannot choose {k} hubs from {len(candidates)} candidates")
    cand = list(candidates)
    dist = net.intersection_free_flow[np.ix_(cand, cand)]
    res = pam(dist, k, seed=seed)
    return sorted(cand[m] for m in res.medoids)


def default_d_max(net: RoadNetwork) -> float:
    span = net.coords.max(axis=0) - net.coords.min(axis=0)
    return float(np.hypot(*span) / 2)


def connect_hubs(net: RoadNetwork, hubs: Sequence[int], k: int = 3,
                 d_max: float | None = None) -> HubGraph:
    if len(hubs) < 2:
        raise ValueError("need at least two hubs")
    if d_max is None:
        d_max = default_d_max(net)
    hubs = tuple(hubs)
    xy = net.coords[list(hubs)]
    euclid = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    times = net.intersection_free_flow[np.ix_(hubs, hubs)]
    edges = []
    for a in range(len(hubs)):
        options = sorted((times[a, b], b) for b in range(len(hubs))
                         if b != a and euclid[a, b] <= d_max and np.isfinite(times[a, b]))
        edges.append(tuple((b, float(t)) for t, b in options[:k]))
    adjacency = {a: [b for b, _ in e] for a, e in enumerate(edges)}
    if not is_strongly_connected(len(hubs), adjacency):
        raise HubConnectivityError(
            f"hub graph not strongly connected with d_max={d_max:.1f}; raise d_max or K")
    off = euclid[~np.eye(len(hubs), dtype=bool)]
    r_vic = float(off.min() / 2)
    return HubGraph(hubs, tuple(edges), r_vic, float(d_max))


def hub_graph_for(net: RoadNetwork, num_hubs: int, seed: int = 0,
                  d_max: float | None = None) -> HubGraph:
    """Candidate filter, K-medoids selection and k-nearest connection in one call."""
    cands = filter_hub_candidates(net)
    if len(cands) < num_hubs:
        cands = list(range(net.n_intersections))
    hubs = select_hubs(net, cands, num_hubs, seed=seed)
    return connect_hubs(net, hubs, d_max=d_max)
