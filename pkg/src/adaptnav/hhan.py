"""Hub-level routing agents trained with attentive monotonic Q-mixing.

Vehicles travel hub to hub.  When a vehicle enters the vicinity of the hub it
is heading for, that hub's agent picks the next hub (one of at most three
graph neighbours) and the vehicle follows the free-flow shortest path toward
it.  Decisions are bundled into Global Collection Epochs; each epoch becomes
one training transition for the mixer.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mesosim import RoutingQuery, RoutingResponse, Simulation, trichotomy
from .netgraph import HubGraph, RoadNetwork, intersection_times_many, shortest_path, zorder_matrix
from .tensorcore import (ParamSet, adam_init, adam_step, clip_grad_norm, elu, elu_backward,
                         linear_backward, linear_forward, load_checkpoint, polyak_update, relu,
                         relu_backward, save_checkpoint, stacked_linear_backward,
                         stacked_linear_forward, xavier_uniform)

N_SLOTS = 3
RATIO_CAP = 10.0   # congestion ratio at the 0.1 speed floor
EST_CAP = 5.0


@dataclass
class HHANConfig:
    num_hubs: int = 4
    hub_agent_dim: int = 64
    z_order_embedding_dim: int = 8
    lr: float = 5e-4
    mixing_lr: float = 5e-4
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay: float = 0.99
    polyak: float = 0.995
    min_gce_buffer_size: int = 200
    gce_buffer_capacity: int = 10000
    qmix_batch_size: int = 64
    qmix_update_frequency_steps: int = 32
    mixing_hidden_dim: int = 128
    gce_size: int = 10
    gce_max_sim_time: int = 100
    clip_grad_norm: float = 10.0
    cost_reward: bool = True
    seed: int = 0


def geometric_epsilon(episode: int, start: float = 1.0, decay: float = 0.99, floor: float = 0.05) -> float:
    return max(floor, start * decay ** max(episode, 0))


def norm_ratio(ratio: float) -> float:
    return float(np.clip((ratio - 1.0) / (RATIO_CAP - 1.0), 0.0, 1.0))


# ---------------------------------------------------------------- records

@dataclass
class DecisionRecord:
    agent: int
    vc: int
    tau: np.ndarray
    mask: np.ndarray
    action: int
    q_value: float
    t: int
    epoch: int = -1
    next_agent: int = -1
    next_tau: np.ndarray | None = None
    next_mask: np.ndarray | None = None
    terminal: bool = False
    resolved: bool = False


@dataclass
class GceTransition:
    epoch: int
    s: np.ndarray
    decisions: list[list[DecisionRecord]]
    r: float
    s_next: np.ndarray
    t_open: int
    t_close: int
    terms: tuple[float, float, float]
    reason: str

    @property
    def n_decisions(self) -> int:
        return sum(len(d) for d in self.decisions)

    @property
    def ready(self) -> bool:
        return all(d.resolved for ds in self.decisions for d in ds)

    @property
    def terminal(self) -> bool:
        return all(d.terminal for ds in self.decisions for d in ds)


def gce_reward(completions: int, starts: int, inefficiencies: Sequence[float],
               congested_fractions: Sequence[float]) -> tuple[float, tuple[float, float, float]]:
    """Scalar epoch reward and its (throughput, inefficiency, congestion) terms."""
    throughput = completions / max(1, starts)
    ineff = float(np.mean(inefficiencies)) - 1.0 if len(inefficiencies) else 0.0
    cong = float(np.mean(congested_fractions)) if len(congested_fractions) else 0.0
    return throughput - ineff - 0.5 * cong, (throughput, ineff, cong)


def gce_cost(terms: tuple[float, float, float]) -> float:
    """Non-positive learning reward from the epoch terms.

    Transitions end per vehicle, so a positive per-epoch reward makes every
    extra hop worth more than arriving. Capping throughput at 1 and shifting
    by -1 keeps every reward at or below 0, which makes arriving the cheapest
    continuation.
    """
    throughput, ineff, cong = terms
    return min(1.0, throughput) - 1.0 - ineff - 0.5 * cong


# ---------------------------------------------------------------- networks

def init_agents(rng: np.random.Generator, K: int, n_bits: int, n_feat: int, emb: int, hid: int) -> ParamSet:
    ps = ParamSet()
    ps.add("emb.W", xavier_uniform(rng, emb, n_bits, lead=(K,)))
    ps.add("emb.b", np.zeros((K, emb)))
    ps.add("fc1.W", xavier_uniform(rng, hid, emb + n_feat, lead=(K,)))
    ps.add("fc1.b", np.zeros((K, hid)))
    ps.add("fc2.W", xavier_uniform(rng, hid, hid, lead=(K,)))
    ps.add("fc2.b", np.zeros((K, hid)))
    ps.add("out.W", xavier_uniform(rng, N_SLOTS, hid, lead=(K,)))
    ps.add("out.b", np.zeros((K, N_SLOTS)))
    return ps


def agent_forward(P: ParamSet, idx: np.ndarray, tau: np.ndarray, n_bits: int):
    """Per-agent utilities [B, 3] of observations ``tau`` (bits first, then features)."""
    bits, feat = tau[:, :n_bits], tau[:, n_bits:]
    z0 = stacked_linear_forward(P["emb.W"], P["emb.b"], idx, bits)
    x1 = np.concatenate([relu(z0), feat], axis=1)
    z1 = stacked_linear_forward(P["fc1.W"], P["fc1.b"], idx, x1)
    x2 = relu(z1)
    z2 = stacked_linear_forward(P["fc2.W"], P["fc2.b"], idx, x2)
    x3 = relu(z2)
    q = stacked_linear_forward(P["out.W"], P["out.b"], idx, x3)
    return q, (idx, bits, z0, x1, z1, x2, z2, x3)


def agent_backward(P: ParamSet, cache, gq: np.ndarray) -> None:
    idx, bits, z0, x1, z1, x2, z2, x3 = cache
    gW, gb, gx = stacked_linear_backward(P["out.W"], idx, x3, gq)
    P.grads["out.W"] += gW
    P.grads["out.b"] += gb
    g = relu_backward(z2, gx)
    gW, gb, gx = stacked_linear_backward(P["fc2.W"], idx, x2, g)
    P.grads["fc2.W"] += gW
    P.grads["fc2.b"] += gb
    g = relu_backward(z1, gx)
    gW, gb, gx = stacked_linear_backward(P["fc1.W"], idx, x1, g)
    P.grads["fc1.W"] += gW
    P.grads["fc1.b"] += gb
    emb = z0.shape[1]
    g = relu_backward(z0, gx[:, :emb])
    gW, gb, _ = stacked_linear_backward(P["emb.W"], idx, bits, g)
    P.grads["emb.W"] += gW
    P.grads["emb.b"] += gb


def init_aggregator(rng: np.random.Generator, in_dim: int, hid: int) -> ParamSet:
    ps = ParamSet()
    ps.add("W1", xavier_uniform(rng, hid, in_dim))
    ps.add("w", xavier_uniform(rng, 1, hid)[0])
    return ps


def segment_softmax(score: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Softmax within contiguous segments beginning at ``starts``."""
    seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(score)]))
    mx = np.maximum.reduceat(score, starts)
    e = np.exp(score - mx[seg])
    return e / np.add.reduceat(e, starts)[seg]


def aggregate_forward(P: ParamSet, s_rows: np.ndarray, tau: np.ndarray, q: np.ndarray,
                      starts: np.ndarray):
    """Attention-weighted utility per segment. Rows must be grouped by segment.

    Returns (Q* [n_segments], alpha [D], cache).
    """
    X = np.concatenate([s_rows, tau, q[:, None]], axis=1)
    u = np.tanh(X @ P["W1"].T)
    score = u @ P["w"]
    alpha = segment_softmax(score, starts)
    qstar = np.add.reduceat(alpha * q, starts)
    return qstar, alpha, (X, u, alpha, q, starts)


def aggregate_backward(P: ParamSet, cache, g_qstar: np.ndarray) -> np.ndarray:
    """Accumulate grads; returns dL/dq per decision."""
    X, u, alpha, q, starts = cache
    seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(q)]))
    gs = g_qstar[seg]
    g_q = alpha * gs
    g_alpha = gs * q
    g_score = alpha * (g_alpha - np.add.reduceat(alpha * g_alpha, starts)[seg])
    P.grads["w"] += g_score @ u
    g_pre = (g_score[:, None] * P["w"]) * (1.0 - u * u)
    P.grads["W1"] += g_pre.T @ X
    g_X = g_pre @ P["W1"]
    return g_q + g_X[:, -1]


def init_mixer(rng: np.random.Generator, state_dim: int, K: int, hid: int) -> ParamSet:
    ps = ParamSet()
    ps.add("hw1.W", xavier_uniform(rng, K * hid, state_dim))
    ps.add("hw1.b", np.zeros(K * hid))
    ps.add("hb1.W", xavier_uniform(rng, hid, state_dim))
    ps.add("hb1.b", np.zeros(hid))
    ps.add("hw2.W", xavier_uniform(rng, hid, state_dim))
    ps.add("hw2.b", np.zeros(hid))
    ps.add("v1.W", xavier_uniform(rng, hid, state_dim))
    ps.add("v1.b", np.zeros(hid))
    ps.add("v2.W", xavier_uniform(rng, 1, hid))
    ps.add("v2.b", np.zeros(1))
    return ps


def mixer_forward(P: ParamSet, s: np.ndarray, qs: np.ndarray):
    """Monotone mix of per-agent utilities. s [B, S], qs [B, K] -> Q_tot [B]."""
    B, K = qs.shape
    hid = P["hb1.b"].shape[0]
    hw1 = linear_forward(P["hw1.W"], P["hw1.b"], s).reshape(B, K, hid)
    w1 = np.abs(hw1)
    b1 = linear_forward(P["hb1.W"], P["hb1.b"], s)
    pre = np.einsum("bk,bke->be", qs, w1) + b1
    h = elu(pre)
    hw2 = linear_forward(P["hw2.W"], P["hw2.b"], s)
    w2 = np.abs(hw2)
    zv = linear_forward(P["v1.W"], P["v1.b"], s)
    v = linear_forward(P["v2.W"], P["v2.b"], relu(zv))[:, 0]
    qtot = (h * w2).sum(axis=1) + v
    return qtot, (s, qs, hw1, w1, pre, h, hw2, w2, zv)


def mixer_weights(P: ParamSet, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The nonnegative mixing weights (w1 [B,K,E], w2 [B,E]) for states ``s``."""
    B = len(s)
    hid = P["hb1.b"].shape[0]
    w1 = np.abs(linear_forward(P["hw1.W"], P["hw1.b"], s)).reshape(B, -1, hid)
    w2 = np.abs(linear_forward(P["hw2.W"], P["hw2.b"], s))
    return w1, w2


def mixer_backward(P: ParamSet, cache, g: np.ndarray) -> np.ndarray:
    s, qs, hw1, w1, pre, h, hw2, w2, zv = cache
    B, K, hid = w1.shape
    g_h = g[:, None] * w2
    g_hw2 = g[:, None] * h * np.sign(hw2)
    gW, gb, _ = linear_backward(P["hw2.W"], s, g_hw2)
    P.grads["hw2.W"] += gW
    P.grads["hw2.b"] += gb
    gW, gb, g_v1 = linear_backward(P["v2.W"], relu(zv), g[:, None])
    P.grads["v2.W"] += gW
    P.grads["v2.b"] += gb
    gW, gb, _ = linear_backward(P["v1.W"], s, relu_backward(zv, g_v1))
    P.grads["v1.W"] += gW
    P.grads["v1.b"] += gb
    g_pre = elu_backward(pre, g_h)
    gW, gb, _ = linear_backward(P["hb1.W"], s, g_pre)
    P.grads["hb1.W"] += gW
    P.grads["hb1.b"] += gb
    g_w1 = qs[:, :, None] * g_pre[:, None, :]
    g_hw1 = (g_w1 * np.sign(hw1)).reshape(B, K * hid)
    gW, gb, _ = linear_backward(P["hw1.W"], s, g_hw1)
    P.grads["hw1.W"] += gW
    P.grads["hw1.b"] += gb
    return np.einsum("be,bke->bk", g_pre, w1)


# ---------------------------------------------------------------- the system

@dataclass
class _Vehicle:
    dest: int
    dest_hub: int
    plan: list[int] = field(default_factory=list)
    target: int | None = None
    decided_at: int | None = None
    final: bool = False
    last: DecisionRecord | None = None


class HHANSystem:
    """Hub agents, attention aggregator and mixer, plus the GCE collector.

    The instance is itself a mesosim router; set ``training`` to False for
    frozen decentralised execution (only the agent networks are consulted).
    """

    def __init__(self, net: RoadNetwork, hubs: HubGraph, config: HHANConfig | None = None):
        self.net = net
        self.hubs = hubs
        self.config = cfg = config or HHANConfig()
        self.K = len(hubs.hubs)
        self.hub_nodes = np.asarray(hubs.hubs)
        zb = zorder_matrix(net)
        self.hub_bits = zb[self.hub_nodes]
        self.n_bits = zb.shape[1]
        self.n_feat = 2 + 3 * N_SLOTS
        self.tau_dim = self.n_bits + self.n_feat
        self.state_dim = 2 * self.K + 4
        ff = net.intersection_free_flow
        self.diameter = float(np.max(ff[np.isfinite(ff)]))
        self.dest_hub = np.argmin(ff[self.hub_nodes, :], axis=0)      # hub index per intersection
        self.ff_hub = ff[np.ix_(self.hub_nodes, self.hub_nodes)]
        self.nbr = np.full((self.K, N_SLOTS), -1, dtype=np.int64)
        for k in range(self.K):
            for j, (m, _) in enumerate(hubs.edges[k][:N_SLOTS]):
                self.nbr[k, j] = m
        self.nbr_mask = self.nbr >= 0
        d = np.linalg.norm(net.coords[:, None, :] - net.coords[self.hub_nodes][None], axis=2)
        self.node_hub_dist = d                                           # [N, K]

        rng = np.random.default_rng(cfg.seed)
        self.agents = init_agents(rng, self.K, self.n_bits, self.n_feat, cfg.z_order_embedding_dim,
                                  cfg.hub_agent_dim)
        self.aggregator = init_aggregator(rng, self.state_dim + self.tau_dim + 1, cfg.hub_agent_dim)
        self.mixer = init_mixer(rng, self.state_dim, self.K, cfg.mixing_hidden_dim)
        self.targets = {"agents": self.agents.copy(), "aggregator": self.aggregator.copy(),
                        "mixer": self.mixer.copy()}
        self.adam_agents = adam_init(self.agents, cfg.lr)
        self.adam_agg = adam_init(self.aggregator, cfg.mixing_lr)
        self.adam_mix = adam_init(self.mixer, cfg.mixing_lr)
        self.act_rng = np.random.default_rng([cfg.seed, 1])
        self.train_rng = np.random.default_rng([cfg.seed, 2])
        self.epsilon = cfg.epsilon_start
        self.training = True
        self.buffer: deque[GceTransition] = deque(maxlen=cfg.gce_buffer_capacity)
        self.waiting: list[GceTransition] = []
        self.transitions: list[GceTransition] = []
        self.keep_transitions = False
        self.update_log: list[tuple[int, int, float]] = []   # (decision count, buffer size, loss)
        self.decision_log: list[DecisionRecord] | None = None
        self.n_decisions = 0
        self._since_update = 0
        self._epoch_id = 0
        self._spf_cache: dict = {}
        self._live_key = None
        self._live = None
        self._feats = None
        self._reset_episode_state()

    # ------------------------------------------------------------ episode state

    def _reset_episode_state(self) -> None:
        self.vehicles: dict[int, _Vehicle] = {}
        self._epoch: dict | None = None

    def on_episode_start(self, sim: Simulation) -> None:
        self._reset_episode_state()
        self._open_epoch(sim)

    # ------------------------------------------------------------ observations

    def _live_hub_times(self, sim: Simulation) -> np.ndarray:
        key = (id(sim), sim.t)
        if key != self._live_key:
            self._live_key = key
            times = intersection_times_many(self.net, sim.live_travel_times(), self.hub_nodes)
            self._live = times[:, self.hub_nodes]
            r = self.hubs.r_vic
            self._feats = np.array([[sim.vicinity_speed(int(h), r),
                                     norm_ratio(sim.congestion_ratio(int(h), r))]
                                    for h in self.hub_nodes])
        return self._live

    def hub_features(self, sim: Simulation) -> np.ndarray:
        """[K, 2]: vicinity speed and normalised congestion ratio per hub, as of this step."""
        self._live_hub_times(sim)
        return self._feats

    def local_observation(self, sim: Simulation, k: int, dest_hub: int,
                          feats: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(tau, valid-slot mask) for hub ``k`` serving a trip bound for hub ``dest_hub``."""
        feats = self.hub_features(sim) if feats is None else feats
        live = self._live_hub_times(sim)
        blocks = np.zeros((N_SLOTS, 3))
        for j in range(N_SLOTS):
            m = self.nbr[k, j]
            if m < 0:
                continue
            est = live[k, m] / (EST_CAP * self.ff_hub[k, m])
            blocks[j] = [min(est, 1.0), feats[m, 1], self.ff_hub[m, dest_hub] / self.diameter]
        tau = np.concatenate([self.hub_bits[dest_hub], feats[k], blocks.reshape(-1)])
        return tau, self.nbr_mask[k].copy()

    def global_state(self, sim: Simulation, feats: np.ndarray | None = None) -> np.ndarray:
        feats = self.hub_features(sim) if feats is None else feats
        active, throughput, ineff, spread = sim.system_summary()
        cap = max(sim.config.vehicle_cap, 1)
        tail = [active / cap, throughput, min(ineff - 1.0, EST_CAP) / EST_CAP, spread]
        return np.concatenate([feats.reshape(-1), tail])

    # ------------------------------------------------------------ routing

    def q_values(self, k: int, tau: np.ndarray, params: ParamSet | None = None) -> np.ndarray:
        q, _ = agent_forward(params or self.agents, np.array([k]), tau[None], self.n_bits)
        return q[0]

    def _spf(self, road: int, dest: int) -> list[int]:
        key = (road, dest)
        if key not in self._spf_cache:
            self._spf_cache[key] = shortest_path(self.net, self.net.free_flow_times, road, dest)
        return list(self._spf_cache[key])

    def _hub_at(self, node: int) -> int | None:
        d = self.node_hub_dist[node]
        k = int(np.argmin(d))
        return k if d[k] <= self.hubs.r_vic else None

    def _decide(self, v: _Vehicle, k: int, q: RoutingQuery, sim: Simulation) -> None:
        if k == v.dest_hub:
            v.plan = self._spf(q.r_c, v.dest)
            v.final = True
            return
        tau, mask = self.local_observation(sim, k, v.dest_hub)
        qv = self.q_values(k, tau)
        choices = np.flatnonzero(mask)
        if self.epsilon > 0 and self.act_rng.random() < self.epsilon:
            a = int(choices[self.act_rng.integers(len(choices))])
        else:
            a = int(np.argmax(np.where(mask, qv, -np.inf)))
        rec = DecisionRecord(k, q.vc, tau, mask, a, float(qv[a]), q.t)
        self._record(v, rec, sim)
        nxt = int(self.nbr[k, a])
        if nxt == v.dest_hub:
            v.plan = self._spf(q.r_c, v.dest)
            v.final = True
        else:
            v.plan = self._spf(q.r_c, int(self.hub_nodes[nxt]))
            v.target = nxt
            v.decided_at = q.u

    def _first_query(self, q: RoutingQuery, sim: Simulation) -> _Vehicle:
        v = _Vehicle(q.i_d, int(self.dest_hub[q.i_d]))
        self.vehicles[q.vc] = v
        k = self._hub_at(q.u)
        if k is not None:
            self._decide(v, k, q, sim)
            return v
        ff = self.net.intersection_free_flow[q.u, self.hub_nodes]
        near = int(np.argmin(ff))
        if near == v.dest_hub:
            v.plan = self._spf(q.r_c, v.dest)
            v.final = True
        else:
            v.plan = self._spf(q.r_c, int(self.hub_nodes[near]))
            v.target = near
        return v

    def __call__(self, q: RoutingQuery, sim: Simulation) -> RoutingResponse:
        owed = trichotomy(q)
        if owed is not None:
            self._end_trip(q.vc)
            return owed
        v = self.vehicles.get(q.vc)
        if v is None:
            v = self._first_query(q, sim)
        elif not v.final and v.target is not None and q.u != v.decided_at and (
                self.node_hub_dist[q.u, v.target] <= self.hubs.r_vic or not v.plan):
            self._decide(v, v.target, q, sim)
        if not v.plan:
            v.plan = self._spf(q.r_c, v.dest)
            v.final = True
        return RoutingResponse.next_road(v.plan.pop(0))

    # ------------------------------------------------------------ GCE bookkeeping

    def _record(self, v: _Vehicle, rec: DecisionRecord, sim: Simulation) -> None:
        self.n_decisions += 1
        if self.decision_log is not None:
            self.decision_log.append(rec)
        if v.last is not None:
            v.last.next_agent = rec.agent
            v.last.next_tau = rec.tau
            v.last.next_mask = rec.mask
            v.last.resolved = True
        v.last = rec
        if not self.training:
            return
        if self._epoch is None:
            self._open_epoch(sim)
        rec.epoch = self._epoch["id"]
        self._epoch["decisions"][rec.agent].append(rec)
        self._epoch["count"] += 1
        self._since_update += 1
        if self._epoch["count"] >= self.config.gce_size:
            self._close_epoch(sim, "count")

    def _end_trip(self, vc: int) -> None:
        v = self.vehicles.pop(vc, None)
        if v is not None and v.last is not None:
            v.last.terminal = True
            v.last.resolved = True

    def _open_epoch(self, sim: Simulation) -> None:
        self._epoch = dict(id=self._epoch_id, t_open=sim.t, s=self.global_state(sim),
                           decisions=[[] for _ in range(self.K)], count=0,
                           n_done=len(sim.completed_log), n_start=len(sim.started_log),
                           n_cong=len(sim.congestion_log))
        self._epoch_id += 1

    def _close_epoch(self, sim: Simulation, reason: str) -> None:
        ep = self._epoch
        self._epoch = None
        if ep["count"] == 0:
            self._open_epoch(sim)
            return
        done = sim.completed_log[ep["n_done"]:]
        starts = len(sim.started_log) - ep["n_start"]
        r, terms = gce_reward(len(done), starts, [x for _, x in done], sim.congestion_log[ep["n_cong"]:])
        if self.config.cost_reward:
            r = gce_cost(terms)
        tr = GceTransition(ep["id"], ep["s"], ep["decisions"], r, self.global_state(sim),
                           ep["t_open"], sim.t, terms, reason)
        self.waiting.append(tr)
        if self.keep_transitions:
            self.transitions.append(tr)
        self._open_epoch(sim)

    def _flush_ready(self) -> None:
        still = []
        for tr in self.waiting:
            (self.buffer.append if tr.ready else still.append)(tr)
        self.waiting = still

    def after_step(self, sim: Simulation, events=None) -> None:
        if not self.training:
            return
        if self._epoch is None:
            self._open_epoch(sim)
        elif sim.t - self._epoch["t_open"] >= self.config.gce_max_sim_time:
            self._close_epoch(sim, "time")
        self._flush_ready()
        cfg = self.config
        if self._since_update >= cfg.qmix_update_frequency_steps:
            self._since_update = 0
            if len(self.buffer) >= max(cfg.qmix_batch_size, cfg.min_gce_buffer_size):
                loss = self.train_step()
                self.update_log.append((self.n_decisions, len(self.buffer), loss))

    def on_episode_end(self, sim: Simulation) -> None:
        if self.training and self._epoch is not None and self._epoch["count"] > 0:
            self._close_epoch(sim, "episode-end")
        self._flush_ready()
        # epochs whose vehicles were cut off by the horizon cannot be bootstrapped
        self.waiting = []
        self._reset_episode_state()

    # ------------------------------------------------------------ learning

    def _flatten(self, batch: Sequence[GceTransition], nxt: bool):
        """Decision rows grouped by (transition, agent) plus segment bookkeeping."""
        rows_s, taus, agents, acts, masks, seg_of = [], [], [], [], [], []
        starts, seg_index = [], []
        live_rows = []
        for b, tr in enumerate(batch):
            s = tr.s_next if nxt else tr.s
            for k in range(self.K):
                ds = tr.decisions[k]
                if not ds:
                    continue
                starts.append(len(taus))
                seg_index.append((b, k))
                for d in ds:
                    rows_s.append(s)
                    if nxt:
                        live_rows.append(not d.terminal)
                        taus.append(np.zeros(self.tau_dim) if d.terminal else d.next_tau)
                        agents.append(0 if d.terminal else d.next_agent)
                        masks.append(np.ones(N_SLOTS, bool) if d.terminal else d.next_mask)
                    else:
                        taus.append(d.tau)
                        agents.append(k)
                        acts.append(d.action)
        out = dict(s=np.array(rows_s), tau=np.array(taus), agent=np.array(agents, dtype=np.int64),
                   starts=np.array(starts, dtype=np.int64), seg=np.array(seg_index, dtype=np.int64))
        if nxt:
            out["live"] = np.array(live_rows, dtype=bool)
            out["mask"] = np.array(masks, dtype=bool)
        else:
            out["action"] = np.array(acts, dtype=np.int64)
        return out

    def _qstar_matrix(self, B: int, flat: dict, qstar: np.ndarray) -> np.ndarray:
        Q = np.zeros((B, self.K))
        Q[flat["seg"][:, 0], flat["seg"][:, 1]] = qstar
        return Q

    def td_targets(self, batch: Sequence[GceTransition]) -> np.ndarray:
        B = len(batch)
        r = np.array([tr.r for tr in batch])
        terminal = np.array([tr.terminal for tr in batch])
        flat = self._flatten(batch, nxt=True)
        T = self.targets
        q, _ = agent_forward(T["agents"], flat["agent"], flat["tau"], self.n_bits)
        v = np.where(flat["live"], np.max(np.where(flat["mask"], q, -np.inf), axis=1), 0.0)
        qstar, _, _ = aggregate_forward(T["aggregator"], flat["s"], flat["tau"], v, flat["starts"])
        s_next = np.array([tr.s_next for tr in batch])
        qtot, _ = mixer_forward(T["mixer"], s_next, self._qstar_matrix(B, flat, qstar))
        return r + self.config.gamma * np.where(terminal, 0.0, qtot)

    def loss_and_grads(self, batch: Sequence[GceTransition], y: np.ndarray) -> float:
        B = len(batch)
        flat = self._flatten(batch, nxt=False)
        q, acache = agent_forward(self.agents, flat["agent"], flat["tau"], self.n_bits)
        rows = np.arange(len(q))
        q_sel = q[rows, flat["action"]]
        qstar, _, gcache = aggregate_forward(self.aggregator, flat["s"], flat["tau"], q_sel, flat["starts"])
        s = np.array([tr.s for tr in batch])
        qtot, mcache = mixer_forward(self.mixer, s, self._qstar_matrix(B, flat, qstar))
        diff = qtot - y
        g_qs = mixer_backward(self.mixer, mcache, 2.0 * diff / B)
        g_qstar = g_qs[flat["seg"][:, 0], flat["seg"][:, 1]]
        g_qsel = aggregate_backward(self.aggregator, gcache, g_qstar)
        gq = np.zeros_like(q)
        gq[rows, flat["action"]] = g_qsel
        agent_backward(self.agents, acache, gq)
        return float(np.mean(diff ** 2))

    def train_step(self, batch: Sequence[GceTransition] | None = None) -> float:
        cfg = self.config
        if batch is None:
            idx = self.train_rng.integers(0, len(self.buffer), size=cfg.qmix_batch_size)
            batch = [self.buffer[i] for i in idx]
        y = self.td_targets(batch)
        loss = self.loss_and_grads(batch, y)
        groups = (self.agents, self.aggregator, self.mixer)
        total = np.sqrt(sum(float(np.sum(g * g)) for ps in groups for g in ps.grads.values()))
        if total > cfg.clip_grad_norm:
            for ps in groups:
                for g in ps.grads.values():
                    g *= cfg.clip_grad_norm / total
        adam_step(self.agents, self.adam_agents)
        adam_step(self.aggregator, self.adam_agg)
        adam_step(self.mixer, self.adam_mix)
        tau = 1.0 - cfg.polyak
        polyak_update(self.targets["agents"], self.agents, tau)
        polyak_update(self.targets["aggregator"], self.aggregator, tau)
        polyak_update(self.targets["mixer"], self.mixer, tau)
        return loss

    # ------------------------------------------------------------ persistence

    def groups(self) -> dict[str, ParamSet]:
        return {"agents": self.agents, "aggregator": self.aggregator, "mixer": self.mixer,
                "agents_target": self.targets["agents"],
                "aggregator_target": self.targets["aggregator"],
                "mixer_target": self.targets["mixer"]}

    def save(self, path: str | Path) -> None:
        meta = {"model": "HHAN", "hubs": [int(h) for h in self.hub_nodes],
                "hub_edges": [[[int(m), float(t)] for m, t in e] for e in self.hubs.edges],
                "r_vic": self.hubs.r_vic, "d_max": self.hubs.d_max}
        save_checkpoint(path, self.groups(), meta)

    def load(self, path: str | Path) -> None:
        groups, meta = load_checkpoint(path)
        if [int(h) for h in meta.get("hubs", [])] != [int(h) for h in self.hub_nodes]:
            raise ValueError("checkpoint hubs do not match this hub graph")
        for name, ps in self.groups().items():
            ps.load_from(groups[name])


def write_gce_trace(path: str | Path, transitions: Sequence[GceTransition]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "t_open", "t_close", "decisions", "reason", "reward",
                    "throughput", "inefficiency", "congestion"])
        for tr in transitions:
            w.writerow([tr.epoch, tr.t_open, tr.t_close, tr.n_decisions, tr.reason, repr(tr.r),
                        *(repr(float(x)) for x in tr.terms)])
