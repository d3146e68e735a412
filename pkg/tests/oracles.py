"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (exhaustive search, explicit loops) and
shares no code with the package beyond its data types.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from adaptnav.netgraph import make_network


def random_network(rng: np.random.Generator, n: int, extra: int = 3, integer_lengths: bool = True):
    """Bidirectional ring on ``n`` random points plus ``extra`` random chords."""
    pts = [(float(x), float(y)) for x, y in rng.uniform(0, 1000, size=(n, 2))]
    pairs = {(i, (i + 1) % n) for i in range(n)} if n > 2 else {(0, 1)}
    for _ in range(extra):
        a, b = rng.choice(n, size=2, replace=False)
        pairs.add((int(min(a, b)), int(max(a, b))))
    pairs = {(min(a, b), max(a, b)) for a, b in pairs}
    links = []
    for a, b in sorted(pairs):
        links += [(a, b), (b, a)]
    lengths = None
    if integer_lengths:
        lengths = [float(rng.integers(1, 6)) * 100 for _ in links]
    return make_network(pts, links, speed=10.0, lengths=lengths)


def brute_shortest_path(net, weights, src: int, dst: int):
    """(cost, path) minimising (cost, path) over every road-simple continuation of ``src``.

    Road-simple (no repeated road) rather than node-simple because turn
    restrictions can make the cheapest route revisit an intersection.
    """
    if net.roads[src].tail == dst:
        return 0.0, []
    best = None

    def dfs(road, cost, path, used):
        nonlocal best
        for nxt in net.roads[road].allowed_next:
            if nxt in used:
                continue
            c = cost + float(weights[nxt])
            p = path + [nxt]
            if net.roads[nxt].tail == dst:
                if best is None or (c, p) < best:
                    best = (c, p)
                continue
            used.add(nxt)
            dfs(nxt, c, p, used)
            used.discard(nxt)

    dfs(src, 0.0, [], {src})
    return best


def floyd_intersections(net, weights) -> np.ndarray:
    """All-pairs intersection travel times ignoring turn restrictions."""
    n = net.n_intersections
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for r in net.roads:
        d[r.head, r.tail] = min(d[r.head, r.tail], weights[r.id])
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return d


def brute_medoids(dist: np.ndarray, k: int) -> float:
    """Optimal k-medoid cost: sum over rows of the distance to the nearest chosen column."""
    n = dist.shape[0]
    best = math.inf
    for combo in itertools.combinations(range(n), k):
        cost = 0.0
        for i in range(n):
            cost += min(dist[i, j] for j in combo)
        best = min(best, cost)
    return best


def quadtree_order(b: int) -> list[tuple[int, int]]:
    """Cells (cx, cy) of a 2^b lattice in depth-first quad-tree order.

    Children visited as (y, x) = (0, 0), (0, 1), (1, 0), (1, 1).
    """
    out = []

    def walk(x0, y0, size):
        if size == 1:
            out.append((x0, y0))
            return
        h = size // 2
        for dy in (0, 1):
            for dx in (0, 1):
                walk(x0 + dx * h, y0 + dy * h, h)

    walk(0, 0, 1 << b)
    return out


def fd_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``arr`` (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    a, n = np.asarray(a, float), np.asarray(n, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def corridor(hop_times, speed: float = 10.0, origin_len: float = 100.0):
    """One-way corridor 0 -> 1 -> ... -> m+1 with a dead-end spur at nodes 1..m.

    Road 0 is the origin road 0 -> 1; road i (1..m) runs i -> i+1 and takes
    ``hop_times[i-1]`` seconds at free flow.  Each spur node hangs above its
    corridor node with a road out and a road back, so every decision node has
    two actions and the corridor road is always the lower slot.
    Returns (net, spur_roads).
    """
    m = len(hop_times)
    pts = [(100.0 * i, 0.0) for i in range(m + 2)] + [(100.0 * i, 100.0) for i in range(1, m + 1)]
    links = [(0, 1)] + [(i, i + 1) for i in range(1, m + 1)]
    lengths = [origin_len] + [float(t) * speed for t in hop_times]
    spurs = []
    for i in range(1, m + 1):
        s = m + 1 + i
        spurs.append(len(links))
        links += [(i, s), (s, i)]
        lengths += [100.0, 100.0]
    return make_network(pts, links, speed=speed, lengths=lengths), spurs
