import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from adaptnav.an_agent import (ANConfig, ANSystem, ReplayBuffer, TabularRouter, dump_embeddings,
                               init_qnet, linear_epsilon, qnet_backward, qnet_forward, slot_masks)
from adaptnav.harness import QRoutingRouter
from adaptnav.mesosim import ARRIVED, NEXT_ROAD, SUCCESS, RoutingQuery, SimConfig, Simulation, run_episode
from adaptnav.netgraph import build_grid

from oracles import corridor, fd_grad, max_rel_err

HOPS = [5, 7, 3]


def _quiet(net, **kw):
    return Simulation(net, SimConfig(demand_rate=0.0, **kw))


def _an(net, hops=1, **kw):
    return ANSystem(net, ANConfig(hops=hops, **kw))


# ---------------------------------------------------------------- schedule and masks

def test_linear_epsilon():
    assert linear_epsilon(0) == 1.0
    assert linear_epsilon(300) == pytest.approx(0.525)
    assert linear_epsilon(600) == pytest.approx(0.05)
    assert linear_epsilon(5000) == pytest.approx(0.05)


def test_slot_masks_match_allowed_next():
    net = build_grid(3, 4, 100, 10, 1)
    m = slot_masks(net)
    for r in net.roads:
        chosen = {net.out_roads[r.tail][j] for j in np.flatnonzero(m[r.id])}
        assert chosen == set(r.allowed_next)


# ---------------------------------------------------------------- action selection

def test_epsilon_one_uniform_over_valid():
    an = _an(build_grid(3, 3, 100, 10, 1))
    valid = np.array([True, False, True, True])
    picks = np.array([an.select_action(np.zeros(4), valid, 1.0) for _ in range(10_000)])
    assert not np.any(picks == 1)
    counts = np.bincount(picks, minlength=4)[[0, 2, 3]]
    assert chisquare(counts).pvalue > 0.01


def test_greedy_argmax_and_tie_break():
    an = _an(build_grid(3, 3, 100, 10, 1))
    valid = np.ones(4, bool)
    assert an.select_action(np.array([0.0, 1.0, 5.0, 2.0]), valid, 0.0) == 2
    assert an.select_action(np.array([1.0, 3.0, 3.0, 0.0]), valid, 0.0) == 1
    valid[2] = False
    assert an.select_action(np.array([0.0, 1.0, 5.0, 2.0]), valid, 0.0) == 3


@given(st.integers(0, 10_000), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_masked_slot_never_selected(seed, eps):
    rng = np.random.default_rng(seed)
    an = _an(build_grid(2, 2, 100, 10, 1), hops=0, seed=seed)
    valid = rng.random(4) < 0.5
    valid[rng.integers(4)] = True
    q = rng.normal(scale=1e3, size=4)
    for _ in range(20):
        assert valid[an.select_action(q, valid, eps)]


def test_terminal_query_closes_pending():
    net = build_grid(2, 3, 100, 10, 1)
    an = _an(net)
    an.reward_log = {}
    sim = _quiet(net)
    into_1 = next(r for r in net.roads if (r.head, r.tail) == (0, 1))
    into_5 = next(r for r in net.roads if (r.head, r.tail) == (4, 5))
    resp = an(RoutingQuery(3, 7, 1, into_1.id, 5, 100), sim)
    assert resp.kind == NEXT_ROAD and 7 in an.pending
    done = an(RoutingQuery(9, 7, 5, into_5.id, 5, 100), sim)
    assert done.kind == SUCCESS and 7 not in an.pending
    assert an.reward_log[7] == [-6.0]
    buf = an.buffers[an.agent_of[1]]
    assert len(buf) == 1 and buf.terminal[0] and buf.reward[0] == -6.0


# ---------------------------------------------------------------- telescoping oracle

def _corridor_run(router, net, episodes):
    for _ in range(episodes):
        sim = _quiet(net)
        sim.add_trip(0, len(HOPS) + 1)
        rep = run_episode(sim, router, max_steps=200)
        assert rep.trips[0].status == ARRIVED


@pytest.mark.parametrize("cls", [TabularRouter, QRoutingRouter])
def test_tabular_telescoping(cls):
    net, spurs = corridor(HOPS)
    dest = len(HOPS) + 1
    router = cls(net, alpha=1.0, gamma=1.0, epsilon=0.0)
    for i in range(1, len(HOPS) + 1):
        router.Q[i, dest, 1] = -1e6          # spur slot
    _corridor_run(router, net, len(HOPS))
    remaining = np.cumsum(HOPS[::-1])[::-1]    # [15, 10, 3]
    for i in range(1, len(HOPS) + 1):
        assert router.Q[i, dest, 0] == -remaining[i - 1]
        assert router.Q[i, dest, 1] == -1e6
    assert router.Q[1, dest, 0] == -15 and router.Q[len(HOPS), dest, 0] == -3
    # already converged: more episodes change nothing
    before = router.Q.copy()
    _corridor_run(router, net, 2)
    assert np.array_equal(router.Q, before)


def test_an_rewards_on_corridor_telescope():
    net, _ = corridor(HOPS)
    dest = len(HOPS) + 1
    an = _an(net, hops=0, batch_size=10_000)
    an.epsilon = 0.0
    an.q_params["out.W"][...] = 0.0
    an.q_params["out.b"][...] = [1.0, -1.0]     # always the corridor slot
    an.reward_log = {}
    _corridor_run(an, net, 1)
    assert an.reward_log[0] == [-5.0, -7.0, -3.0]
    # exact tabular backup over the recorded experiences (gamma = alpha = 1)
    nodes = list(an.agent_nodes)
    assert nodes == [1, 2, 3]
    Q = {}
    for _ in range(len(HOPS)):
        for a, buf in enumerate(an.buffers):
            assert len(buf) == 1
            nxt = buf.next_agent[0]
            boot = 0.0 if buf.terminal[0] else Q.get(int(nxt), 0.0)
            Q[a] = buf.reward[0] + boot
    assert [Q[a] for a in range(3)] == [-15.0, -10.0, -3.0]
    assert an.buffers[2].terminal[0] and not an.buffers[0].terminal[0]
    assert an.buffers[0].next_agent[0] == 1 and an.buffers[0].dest[0] == dest


# ---------------------------------------------------------------- bookkeeping on the grid

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_reward_sum_equals_travel_time(seed):
    net = build_grid(3, 4, 100, 10, 1)
    an = ANSystem(net, ANConfig(hops=1, seed=seed, batch_size=16), controlled=[True] * 12)
    an.epsilon = 0.3
    an.reward_log = {}
    sim = Simulation(net, SimConfig(demand_rate=2.0, demand_steps=60, max_steps=400, seed=seed))
    rep = run_episode(sim, an, on_step=an.after_step)
    done = [tr for tr in rep.trips if tr.status == ARRIVED]
    assert len(done) > 10
    for tr in done:
        assert sum(an.reward_log[tr.vc]) == -(tr.end_time - tr.first_query_time)
        assert all(r <= 0 for r in an.reward_log[tr.vc])
    assert an.pending == {}
    assert an.losses                      # training happened


def test_pending_never_leaks_on_cutoff():
    net = build_grid(3, 3, 100, 10, 1)
    an = _an(net)
    sim = Simulation(net, SimConfig(demand_rate=3.0, max_steps=40, seed=1))
    seen = []
    run_episode(sim, an, on_step=lambda s, e: seen.append(len(an.pending)))
    assert max(seen) > 0
    assert an.pending == {}


def test_every_response_is_legal_under_exploration():
    # the simulator raises on any illegal next road
    net = build_grid(4, 4, 100, 10, 1)
    an = _an(net, hops=2)
    an.epsilon = 1.0
    rep = run_episode(Simulation(net, SimConfig(demand_rate=3.0, max_steps=200, seed=2)), an)
    assert rep.total > 0


# ---------------------------------------------------------------- networks and gradients

@pytest.mark.parametrize("seed", range(30))
def test_qnet_gradient_check(seed):
    rng = np.random.default_rng(seed)
    A, B, D, L, F = 3, 7, 6, 5, 4
    hidden = [(8, 6), (10, 6), (12, 9, 6)][seed % 3]
    ps = init_qnet(rng, A, D, L, hidden, F)
    for k in ps.names():
        ps[k][...] += rng.normal(scale=0.1, size=ps[k].shape)   # nonzero biases
    idx = rng.integers(0, A, B)
    bits = rng.integers(0, 2, (B, D)).astype(float)
    local = rng.normal(size=(B, L))
    c = rng.normal(size=(B, F))
    q, cache = qnet_forward(ps, idx, bits, local)
    ps.zero_grad()
    g_local = qnet_backward(ps, cache, c)
    f = lambda: float(np.sum(c * qnet_forward(ps, idx, bits, local)[0]))
    for k in ps.names():
        assert max_rel_err(ps.grads[k], fd_grad(f, ps[k])) < 1e-4, k
    assert max_rel_err(g_local, fd_grad(f, local)) < 1e-4


def _synthetic_batch(an, rng, B, terminal=False):
    N, F = an.net.n_intersections, an.F
    agents = rng.integers(0, an.n_agents, B)
    return dict(agent=agents, state=rng.integers(0, 2, (B, N, F)).astype(np.uint8),
                dest=rng.integers(0, N, B), action=np.array([np.flatnonzero(an.slot_mask[0])[0]] * B),
                reward=-rng.integers(1, 30, B).astype(float),
                next_agent=rng.integers(0, an.n_agents, B),
                next_state=rng.integers(0, 2, (B, N, F)).astype(np.uint8),
                next_mask=np.ones((B, F), bool), terminal=np.full(B, terminal))


@pytest.mark.parametrize("hops", [0, 1, 2])
def test_loss_gradient_check_through_gat(hops):
    rng = np.random.default_rng(hops)
    net = build_grid(2, 3, 100, 10, 1)
    an = ANSystem(net, ANConfig(hops=hops), controlled=[True] * 6)
    for ps in (an.q_params, an.gat_params):
        for k in ps.names():    # move zero biases off the ReLU kink
            ps[k][...] += rng.normal(scale=0.1, size=ps[k].shape)
    batch = _synthetic_batch(an, rng, 9)
    y = rng.normal(size=9)

    def loss():
        an.q_params.zero_grad()
        an.gat_params.zero_grad()
        d = an.loss_and_grads(batch, y, train_mode=False)
        counts = np.bincount(batch["agent"], minlength=an.n_agents)[batch["agent"]]
        return float(np.sum(d ** 2 / counts))

    loss()
    gq = {k: v.copy() for k, v in an.q_params.grads.items()}
    gg = {k: v.copy() for k, v in an.gat_params.grads.items()}
    for k in an.q_params.names():
        assert max_rel_err(gq[k], fd_grad(loss, an.q_params[k])) < 1e-4, k
    for k in an.gat_params.names():
        assert max_rel_err(gg[k], fd_grad(loss, an.gat_params[k])) < 1e-4, k
        assert np.any(gg[k] != 0), k


def test_terminal_only_batch_target_is_reward():
    net = build_grid(2, 3, 100, 10, 1)
    an = _an(net)
    batch = _synthetic_batch(an, np.random.default_rng(0), 12, terminal=True)
    assert np.array_equal(an.td_targets(batch), batch["reward"])


def test_single_transition_reaches_fixed_point():
    net = build_grid(3, 3, 100, 10, 1)
    an = ANSystem(net, ANConfig(hops=0, batch_size=8, seed=3))
    rng = np.random.default_rng(0)
    state = rng.integers(0, 2, (9, an.F)).astype(np.uint8)
    nstate = rng.integers(0, 2, (9, an.F)).astype(np.uint8)
    mask = np.array([True, True, False, True])
    for _ in range(8):
        an.buffers[0].push(state, 8, 1, -12.0, 2, nstate, mask, False)
    batch = an._batch(np.array([0]))
    y = an.td_targets(batch)
    assert np.allclose(y, y[0])
    for _ in range(3000):
        an.train_tick(np.array([0]))
    q = an.q_table(state)[0, 8, 1]
    assert abs(q - an.td_targets(an._batch(np.array([0])))[0]) < 1e-3
    assert abs(q - y[0]) < 1e-3         # agent 2's target network never moved


# ---------------------------------------------------------------- replay

def test_replay_ring_capacity():
    buf = ReplayBuffer(3, 2, 4)
    s = np.zeros((2, 4))
    for k in range(5):
        buf.push(s, 0, 0, -float(k), 1, s, np.ones(4, bool), k == 4)
    assert len(buf) == 3
    assert sorted(buf.reward.tolist()) == [-4.0, -3.0, -2.0]
    assert not buf.next_mask[(buf.cursor - 1) % 3].any()


# ---------------------------------------------------------------- persistence and dumps

def test_checkpoint_round_trip(tmp_path):
    net = build_grid(3, 3, 100, 10, 1)
    a = _an(net, seed=1)
    b = _an(net, seed=2)
    p = tmp_path / "an.json"
    a.save(p)
    b.load(p)
    state = np.random.default_rng(0).integers(0, 2, (9, a.F)).astype(np.uint8)
    assert np.array_equal(a.q_table(state), b.q_table(state))
    with pytest.raises(ValueError):
        ANSystem(build_grid(3, 4, 100, 10, 1)).load(p)


def test_embedding_dump(tmp_path):
    net = build_grid(3, 4, 100, 10, 1)
    e1 = dump_embeddings(_an(net, seed=5), tmp_path / "a.csv")
    e2 = dump_embeddings(_an(net, seed=5), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert len(rows) == 1 + 12 and len(rows[1]) == 3 + e1.shape[1]

    an = _an(net, seed=5, batch_size=16)
    an.epsilon = 1.0
    for s in range(3):
        sim = Simulation(net, SimConfig(demand_rate=3.0, demand_steps=80, max_steps=300, seed=s))
        run_episode(sim, an, on_step=an.after_step)
    e3 = an.destination_embeddings()
    assert np.array_equal(e1, e2)
    assert np.linalg.norm(e3 - e1) > 1e-3
