import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptnav.netgraph import (EncodingCollisionError, HubConnectivityError, LoadError, NoPathError,
                               build_grid, connect_hubs, default_d_max, filter_hub_candidates,
                               hub_graph_for, int_to_bits, intersection_times,
                               intersection_times_many, load_network, make_network,
                               medoid_cost, network_to_dict, next_hops, pam, save_network,
                               select_hubs, shortest_path, zorder_codes, zorder_id, zorder_matrix)

from oracles import brute_medoids, brute_shortest_path, floyd_intersections, quadtree_order, random_network


# ---------------------------------------------------------------- grids

def test_default_grid_size():
    net = build_grid(5, 6, 200, 13.89, 2)
    assert net.n_intersections == 30
    assert net.n_roads == 98


def test_smallest_grid():
    net = build_grid(2, 2, 100, 10, 1)
    assert (net.n_intersections, net.n_roads) == (4, 8)


def test_grid_rejects_small_dims():
    with pytest.raises(ValueError):
        build_grid(1, 5)


def test_3x3_degree_and_connectivity():
    net = build_grid(3, 3, 150, 10, 1)
    assert net.max_out_degree == 4
    assert len(net.out_roads[4]) == 4
    d = floyd_intersections(net, net.free_flow_times)
    assert np.all(np.isfinite(d))


def test_grid_controls_all_but_corners():
    net = build_grid(5, 6, 100, 13.89, 1)
    corners = {0, 5, 24, 29}
    assert [i for i, c in enumerate(net.controlled) if not c] == sorted(corners)
    assert sum(net.controlled) == 26


# ---------------------------------------------------------------- next hops

def test_interior_road_has_three_next_hops():
    net = build_grid(5, 6, 100, 13.89, 1)
    # road from 7 to 8: node 8 is interior with 4 exits, U-turn back to 7 excluded
    r = next(r for r in net.roads if (r.head, r.tail) == (7, 8))
    hops = next_hops(net, r.id)
    assert len(hops) == 3
    assert all(net.roads[h].head == 8 and net.roads[h].tail != 7 for h in hops)
    assert hops == sorted(hops)


def test_corner_next_hops_on_2x2():
    net = build_grid(2, 2, 100, 10, 1)
    for r in net.roads:
        assert 1 <= len(next_hops(net, r.id)) <= 2


def test_dead_end_allows_u_turn():
    net = make_network([(0, 0), (100, 0), (200, 0)], [(0, 1), (1, 0), (1, 2), (2, 1)])
    into_stub = next(r for r in net.roads if (r.head, r.tail) == (1, 2))
    back = next(r for r in net.roads if (r.head, r.tail) == (2, 1))
    assert next_hops(net, into_stub.id) == [back.id]


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_next_hops_start_at_tail(seed):
    net = random_network(np.random.default_rng(seed), 6)
    for r in net.roads:
        assert all(net.roads[h].head == r.tail for h in next_hops(net, r.id))


# ---------------------------------------------------------------- file format

def test_network_round_trip(tmp_path):
    net = build_grid(2, 2, 100, 10, 1)
    p = tmp_path / "net.json"
    save_network(net, p)
    back = load_network(p)
    assert back == net
    assert back.n_intersections == 4


def _write(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    return p


def test_load_rejects_self_loop(tmp_path):
    doc = network_to_dict(build_grid(2, 2, 100, 10, 1))
    doc["roads"][0]["tail"] = doc["roads"][0]["head"]
    with pytest.raises(LoadError, match="self-loop"):
        load_network(_write(tmp_path, doc))


def test_load_rejects_missing_next_road(tmp_path):
    doc = network_to_dict(build_grid(2, 2, 100, 10, 1))
    doc["roads"][0]["allowed_next"] = [99]
    with pytest.raises(LoadError, match="missing road"):
        load_network(_write(tmp_path, doc))


def test_load_rejects_nonpositive_length(tmp_path):
    doc = network_to_dict(build_grid(2, 2, 100, 10, 1))
    doc["roads"][2]["length"] = 0
    with pytest.raises(LoadError, match="length"):
        load_network(_write(tmp_path, doc))


def test_load_reports_parse_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"format_version": 1,\n "roads": [}')
    with pytest.raises(LoadError, match="line 2"):
        load_network(p)


# ---------------------------------------------------------------- Z-order

def test_zorder_example_index_two():
    assert int_to_bits(2, 3) == [0, 1, 0]


def test_zorder_origin_all_zero():
    net = build_grid(4, 4, 100, 10, 1)
    assert zorder_id(net, 0, 2) == [0, 0, 0, 0]


def test_zorder_follows_quadtree_walk():
    net = build_grid(4, 4, 100, 10, 1)   # node r*4+c at cell (c, r)
    codes = zorder_codes(net, 2)
    by_rank = sorted(range(16), key=lambda i: codes[i])
    walk = quadtree_order(2)
    assert [(i % 4, i // 4) for i in by_rank] == walk


def test_zorder_collision_raises():
    net = build_grid(4, 4, 100, 10, 1)
    with pytest.raises(EncodingCollisionError):
        zorder_codes(net, 1)


def test_zorder_unique_on_grids():
    for rows, cols in [(2, 2), (3, 5), (5, 6), (7, 7)]:
        z = zorder_matrix(build_grid(rows, cols, 100, 10, 1))
        assert len({tuple(r) for r in z}) == rows * cols


@pytest.mark.parametrize("b", [1, 2, 3, 4, 5])
def test_zorder_quadrant_prefix(b):
    n = 1 << b
    net = build_grid(n, n, 10, 10, 1)
    codes = np.array(zorder_codes(net, b))
    cx = np.arange(n * n) % n
    cy = np.arange(n * n) // n
    for level in range(1, b + 1):
        shift = b - level
        quad = (cy >> shift) * n + (cx >> shift)
        prefix = codes >> (2 * shift)
        same_quad = quad[:, None] == quad[None, :]
        same_prefix = prefix[:, None] == prefix[None, :]
        assert np.array_equal(same_quad, same_prefix)


# ---------------------------------------------------------------- shortest paths

def test_shortest_path_already_there():
    net = build_grid(2, 2, 100, 10, 1)
    assert shortest_path(net, net.free_flow_times, 0, net.roads[0].tail) == []


def test_shortest_path_tie_break_lexicographic():
    net = build_grid(3, 3, 100, 10, 1)
    rid = {(r.head, r.tail): r.id for r in net.roads}
    src = rid[(3, 4)]
    # two equal-cost routes from the centre to the far corner
    a = [rid[(4, 5)], rid[(5, 8)]]
    b = [rid[(4, 7)], rid[(7, 8)]]
    assert shortest_path(net, net.free_flow_times, src, 8) == min(a, b)


def test_shortest_path_unreachable():
    net = make_network([(0, 0), (100, 0), (200, 0)], [(0, 1), (1, 0), (2, 1)])
    with pytest.raises(NoPathError):
        shortest_path(net, net.free_flow_times, 0, 2)


@given(st.integers(0, 100_000), st.integers(3, 8))
@settings(max_examples=40, deadline=None)
def test_shortest_path_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, extra=int(rng.integers(0, 5)))
    w = net.free_flow_times
    src = int(rng.integers(net.n_roads))
    dst = int(rng.integers(n))
    want = brute_shortest_path(net, w, src, dst)
    if want is None:
        with pytest.raises(NoPathError):
            shortest_path(net, w, src, dst)
    else:
        got = shortest_path(net, w, src, dst)
        assert got == want[1]
        assert sum(w[r] for r in got) == want[0]
        for a, b in zip([src] + got, got):
            assert b in net.roads[a].allowed_next


def test_intersection_times_batched_matches_single():
    net = build_grid(5, 6, 100, 13.89, 1)
    w = np.random.default_rng(0).uniform(5, 30, net.n_roads)
    many = intersection_times_many(net, w, list(range(30)))
    for s in range(30):
        assert np.allclose(many[s], intersection_times(net, w, s), rtol=0, atol=1e-9)


# ---------------------------------------------------------------- hubs

def test_hub_candidates_by_degree():
    net = build_grid(5, 6, 100, 13.89, 1)
    cands = filter_hub_candidates(net)
    want = [i for i in range(30)
            if sum(r.tail == i for r in net.roads) >= 3 and sum(r.head == i for r in net.roads) >= 3]
    assert cands == want
    assert len(cands) == 26          # every non-corner node has degree >= 3


def test_hub_candidates_empty_on_2x2():
    assert filter_hub_candidates(build_grid(2, 2, 100, 10, 1)) == []


def test_hub_candidates_star():
    pts = [(500, 500)] + [(500 + 300 * np.cos(a), 500 + 300 * np.sin(a))
                          for a in np.linspace(0, 2 * np.pi, 5, endpoint=False)]
    links = []
    for k in range(1, 6):
        links += [(0, k), (k, 0)]
    assert filter_hub_candidates(make_network(pts, links)) == [0]


def test_select_hubs_all_candidates():
    net = build_grid(3, 3, 100, 10, 1)
    c = [1, 3, 4]
    assert select_hubs(net, c, 3) == c


def test_select_hubs_too_many():
    net = build_grid(3, 3, 100, 10, 1)
    with pytest.raises(ValueError):
        select_hubs(net, [1, 2], 3)


def test_select_hubs_grid_optimal():
    net = build_grid(5, 6, 100, 13.89, 1)
    cands = filter_hub_candidates(net)
    hubs = select_hubs(net, cands, 4)
    dist = net.intersection_free_flow[np.ix_(cands, cands)]
    cost = medoid_cost(dist, [cands.index(h) for h in hubs])
    best = min(dist[:, list(c)].min(axis=1).sum() for c in itertools.combinations(range(len(cands)), 4))
    assert cost == pytest.approx(best, abs=1e-9)


@given(st.integers(0, 100_000))
@settings(max_examples=20, deadline=None)
def test_pam_cost_non_increasing_and_optimal_on_small(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(4, 11)), int(rng.integers(1, 4))
    d = rng.uniform(0, 10, (n, n))
    np.fill_diagonal(d, 0)
    res = pam(d, k, seed=seed)
    assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))
    assert res.cost == pytest.approx(brute_medoids(d, k), abs=1e-9)


def test_connect_two_hubs():
    net = build_grid(3, 3, 100, 10, 1)
    hg = connect_hubs(net, [0, 8], d_max=1e9)
    assert hg.edges[0][0][0] == 1 and hg.edges[1][0][0] == 0
    assert hg.r_vic == pytest.approx(np.hypot(200, 200) / 2)


def test_connect_four_hubs_saturates():
    net = build_grid(5, 6, 100, 13.89, 1)
    hg = connect_hubs(net, [7, 10, 19, 22], d_max=np.inf)
    assert all(len(e) == 3 for e in hg.edges)


def test_connect_hubs_remote_hub_disconnects():
    net = build_grid(5, 6, 100, 13.89, 1)
    with pytest.raises(HubConnectivityError):
        connect_hubs(net, [0, 1, 6, 29], d_max=150)


def test_default_hub_graph_invariants():
    net = build_grid(5, 6, 100, 13.89, 1)
    hg = hub_graph_for(net, 4)
    assert hg.d_max == pytest.approx(default_d_max(net))
    xy = net.coords[list(hg.hubs)]
    for a, edges in enumerate(hg.edges):
        assert len(edges) <= 3
        for b, t in edges:
            assert np.linalg.norm(xy[a] - xy[b]) <= hg.d_max
            assert t == pytest.approx(net.intersection_free_flow[hg.hubs[a], hg.hubs[b]])
    assert hg.r_vic > 0
