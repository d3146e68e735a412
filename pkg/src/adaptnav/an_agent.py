"""Per-intersection Q-learning agents coordinated through a shared GAT.

Every controlled intersection owns an online and a target Q-network.  The
networks of all agents live in one stacked ``ParamSet`` with a leading agent
axis, so a training tick over many agents is a single vectorised pass.  The
GAT is shared; its gradient is the sum of every sampled agent's contribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gatnet import GatStack, init_gat, neighbor_table, output_dim, stack_config
from .mesosim import RoutingQuery, RoutingResponse, Simulation, trichotomy
from .netgraph import RoadNetwork, shortest_path, zorder_matrix
from .tensorcore import (ParamSet, adam_init, adam_step, clip_grad_norm, load_checkpoint, polyak_update,
                         relu, relu_backward, save_checkpoint, stacked_linear_backward,
                         stacked_linear_forward, xavier_uniform)

DEFAULT_HIDDEN = {0: (8, 6), 1: (10, 6), 2: (12, 9, 6)}


@dataclass
class ANConfig:
    hops: int = 1
    hidden: tuple[int, ...] | None = None
    learning_rate: float = 0.01
    optimizer_eps: float = 1e-4
    batch_size: int = 64
    buffer_size: int = 10000
    gradient_clipping_norm: float = 5.0
    tau: float = 0.01
    discount_rate: float = 0.99
    num_new_exp_to_learn: int = 1
    layer_dims: tuple[int, ...] = (7, 10)
    num_heads_per_layer: int = 3
    dropout: float = 0.6
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 600
    seed: int = 0

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(self.hidden) if self.hidden else DEFAULT_HIDDEN[self.hops]


def linear_epsilon(episode: int, start: float = 1.0, end: float = 0.05, span: int = 600) -> float:
    """Linear decay from ``start`` to ``end`` over ``span`` episodes, then flat."""
    if span <= 0:
        return end
    frac = min(max(episode, 0) / span, 1.0)
    return start + (end - start) * frac


def static_next_hop(net: RoadNetwork, cache: dict, road: int, dest: int) -> int:
    """First road of the free-flow shortest path, memoised on (road, dest)."""
    key = (road, dest)
    hop = cache.get(key)
    if hop is None:
        hop = shortest_path(net, net.free_flow_times, road, dest)[0]
        cache[key] = hop
    return hop


def slot_masks(net: RoadNetwork) -> np.ndarray:
    """[M, F] validity of each outgoing slot of road r's tail under NH(r)."""
    F = net.max_out_degree
    out = np.zeros((net.n_roads, F), dtype=bool)
    for r in net.roads:
        for j, nxt in enumerate(net.out_roads[r.tail]):
            out[r.id, j] = nxt in r.allowed_next
    return out


# ---------------------------------------------------------------- replay

class ReplayBuffer:
    """Fixed-capacity ring of transitions for one agent."""

    def __init__(self, capacity: int, n_nodes: int, width: int):
        self.capacity = capacity
        self.state = np.zeros((capacity, n_nodes, width), dtype=np.uint8)
        self.next_state = np.zeros((capacity, n_nodes, width), dtype=np.uint8)
        self.dest = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.next_agent = np.full(capacity, -1, dtype=np.int64)
        self.next_mask = np.zeros((capacity, width), dtype=bool)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, state, dest, action, reward, next_agent, next_state, next_mask, terminal) -> None:
        k = self.cursor
        self.state[k] = state
        self.dest[k] = dest
        self.action[k] = action
        self.reward[k] = reward
        self.terminal[k] = terminal
        self.next_agent[k] = next_agent
        if terminal:
            self.next_state[k] = 0
            self.next_mask[k] = False
        else:
            self.next_state[k] = next_state
            self.next_mask[k] = next_mask
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, self.size, size=n)


@dataclass
class Pending:
    agent: int
    state: np.ndarray
    dest: int
    action: int
    t: int


# ---------------------------------------------------------------- Q-networks

def init_qnet(rng: np.random.Generator, n_agents: int, dest_dim: int, local_dim: int,
              hidden: Sequence[int], n_actions: int) -> ParamSet:
    ps = ParamSet()
    ps.add("embed.W", xavier_uniform(rng, hidden[0], dest_dim, lead=(n_agents,)))
    ps.add("embed.b", np.zeros((n_agents, hidden[0])))
    fin = hidden[0] + local_dim
    for l, h in enumerate(hidden[1:]):
        ps.add(f"fc{l}.W", xavier_uniform(rng, h, fin, lead=(n_agents,)))
        ps.add(f"fc{l}.b", np.zeros((n_agents, h)))
        fin = h
    ps.add("out.W", xavier_uniform(rng, n_actions, fin, lead=(n_agents,)))
    ps.add("out.b", np.zeros((n_agents, n_actions)))
    return ps


def _n_fc(params: ParamSet) -> int:
    return sum(1 for k in params.names() if k.startswith("fc") and k.endswith(".W"))


def qnet_forward(params: ParamSet, idx: np.ndarray, dest_bits: np.ndarray, local: np.ndarray):
    """Q-values [B, F] for agents ``idx`` given destination bits and local embeddings."""
    z0 = stacked_linear_forward(params["embed.W"], params["embed.b"], idx, dest_bits)
    x = np.concatenate([relu(z0), local], axis=1)
    acts = [(dest_bits, z0)]
    for l in range(_n_fc(params)):
        z = stacked_linear_forward(params[f"fc{l}.W"], params[f"fc{l}.b"], idx, x)
        acts.append((x, z))
        x = relu(z)
    q = stacked_linear_forward(params["out.W"], params["out.b"], idx, x)
    return q, dict(idx=idx, acts=acts, last=x)


def qnet_backward(params: ParamSet, cache: dict, gq: np.ndarray) -> np.ndarray:
    """Accumulate grads; returns dL/d(local embedding)."""
    idx = cache["idx"]
    gW, gb, gx = stacked_linear_backward(params["out.W"], idx, cache["last"], gq)
    params.grads["out.W"] += gW
    params.grads["out.b"] += gb
    acts = cache["acts"]
    for l in range(_n_fc(params) - 1, -1, -1):
        x_in, z = acts[l + 1]
        gz = relu_backward(z, gx)
        gW, gb, gx = stacked_linear_backward(params[f"fc{l}.W"], idx, x_in, gz)
        params.grads[f"fc{l}.W"] += gW
        params.grads[f"fc{l}.b"] += gb
    h0 = params["embed.W"].shape[1]
    g_embed, g_local = gx[:, :h0], gx[:, h0:]
    bits, z0 = acts[0]
    gz0 = relu_backward(z0, g_embed)
    gW, gb, _ = stacked_linear_backward(params["embed.W"], idx, bits, gz0)
    params.grads["embed.W"] += gW
    params.grads["embed.b"] += gb
    return g_local


# ---------------------------------------------------------------- the system

class ANSystem:
    """All AN agents plus the shared GAT, usable directly as a mesosim router."""

    def __init__(self, net: RoadNetwork, config: ANConfig | None = None,
                 controlled: Sequence[bool] | None = None):
        self.net = net
        self.config = cfg = config or ANConfig()
        ctrl = np.asarray(net.controlled if controlled is None else controlled, dtype=bool)
        self.agent_nodes = np.flatnonzero(ctrl)
        self.agent_of = np.full(net.n_intersections, -1, dtype=np.int64)
        self.agent_of[self.agent_nodes] = np.arange(len(self.agent_nodes))
        self.n_agents = len(self.agent_nodes)
        self.F = net.max_out_degree
        self.zbits = zorder_matrix(net)
        self.slot_mask = slot_masks(net)
        table, tmask = neighbor_table(net)
        self.gat = GatStack(stack_config(cfg.hops, self.F, cfg.layer_dims, cfg.num_heads_per_layer),
                            table, tmask, cfg.dropout)
        init_rng = np.random.default_rng(cfg.seed)
        self.gat_params = init_gat(self.gat.specs, init_rng)
        local = output_dim(self.gat.specs, self.F)
        self.q_params = init_qnet(init_rng, self.n_agents, self.zbits.shape[1], local,
                                  cfg.hidden_sizes, self.F)
        self.gat_target = self.gat_params.copy()
        self.q_target = self.q_params.copy()
        self.q_adam = adam_init(self.q_params, cfg.learning_rate, cfg.optimizer_eps, stacked=self.n_agents)
        self.gat_adam = adam_init(self.gat_params, cfg.learning_rate, cfg.optimizer_eps)
        self.buffers = [ReplayBuffer(cfg.buffer_size, net.n_intersections, self.F)
                        for _ in range(self.n_agents)]
        self.new_exp = np.zeros(self.n_agents, dtype=np.int64)
        self.pending: dict[int, Pending] = {}
        self.act_rng = np.random.default_rng([cfg.seed, 1])
        self.train_rng = np.random.default_rng([cfg.seed, 2])
        self.epsilon = cfg.epsilon_start
        self.training = True
        self.losses: list[float] = []
        self.reward_log: dict[int, list[float]] | None = None
        self._fallback: dict = {}
        self._state_key = None
        self._state = None
        self._q_key = None
        self._q_table = None
        self._version = 0

    # ------------------------------------------------------------ observations

    def _current_state(self, sim: Simulation) -> np.ndarray:
        key = (id(sim), sim.t)
        if key != self._state_key:
            self._state_key = key
            self._state = sim.network_state_matrix().astype(np.uint8)
        return self._state

    def embeddings(self, state: np.ndarray, target: bool = False) -> np.ndarray:
        """Local embedding of every intersection for one snapshot [N, F]."""
        X = state[None].astype(float)
        if self.gat.hops == 0:
            return X[0]
        out, _ = self.gat.forward_full(self.gat_target if target else self.gat_params, X)
        return out[0]

    def q_table(self, state: np.ndarray) -> np.ndarray:
        """[A, N, F] online Q-values of every agent toward every destination."""
        A, N = self.n_agents, self.net.n_intersections
        emb = self.embeddings(state)[self.agent_nodes]
        idx = np.repeat(np.arange(A), N)
        q, _ = qnet_forward(self.q_params, idx, np.tile(self.zbits, (A, 1)), np.repeat(emb, N, axis=0))
        return q.reshape(A, N, self.F)

    def _q_for(self, sim: Simulation) -> np.ndarray:
        key = (self._state_key, self._version)
        if key != self._q_key:
            self._q_key = key
            self._q_table = self.q_table(self._current_state(sim))
        return self._q_table

    # ------------------------------------------------------------ routing

    def select_action(self, q_values: np.ndarray, valid: np.ndarray, epsilon: float) -> int:
        """Epsilon-greedy over valid slots; greedy ties go to the lowest slot."""
        choices = np.flatnonzero(valid)
        if epsilon > 0 and self.act_rng.random() < epsilon:
            return int(choices[self.act_rng.integers(len(choices))])
        return int(np.argmax(np.where(valid, q_values, -np.inf)))

    def __call__(self, q: RoutingQuery, sim: Simulation) -> RoutingResponse:
        owed = trichotomy(q)
        if owed is not None:
            self._close(q.vc, q.t, terminal=True)
            return owed
        agent = int(self.agent_of[q.u])
        if agent < 0:
            return RoutingResponse.next_road(static_next_hop(self.net, self._fallback, q.r_c, q.i_d))
        state = self._current_state(sim)
        valid = self.slot_mask[q.r_c]
        self._close(q.vc, q.t, terminal=False, next_agent=agent, next_state=state, next_mask=valid)
        slot = self.select_action(self._q_for(sim)[agent, q.i_d], valid, self.epsilon)
        self.pending[q.vc] = Pending(agent, state, q.i_d, slot, q.t)
        return RoutingResponse.next_road(self.net.out_roads[q.u][slot])

    def _close(self, vc: int, t: int, terminal: bool, next_agent: int = -1,
               next_state: np.ndarray | None = None, next_mask: np.ndarray | None = None) -> None:
        p = self.pending.pop(vc, None)
        if p is None:
            return
        reward = -float(t - p.t)
        if self.reward_log is not None:
            self.reward_log.setdefault(vc, []).append(reward)
        if not self.training:
            return
        self.buffers[p.agent].push(p.state, p.dest, p.action, reward, next_agent,
                                   next_state, next_mask, terminal)
        self.new_exp[p.agent] += 1

    def after_step(self, sim: Simulation, events=None) -> None:
        if not self.training:
            return
        need = self.config.num_new_exp_to_learn
        ready = np.flatnonzero((self.new_exp >= need) & np.array(
            [len(b) >= self.config.batch_size for b in self.buffers]))
        if len(ready):
            self.train_tick(ready)
            self.new_exp[ready] = 0

    def on_episode_end(self, sim: Simulation) -> None:
        # vehicles cut off by the episode horizon have no true successor; drop them
        self.pending.clear()

    # ------------------------------------------------------------ learning

    def _batch(self, agents: np.ndarray):
        B = self.config.batch_size
        parts = []
        for a in agents:
            buf = self.buffers[a]
            k = buf.sample(self.train_rng, B)
            parts.append((buf, k))

        def cat(name):
            return np.concatenate([getattr(buf, name)[k] for buf, k in parts])

        return dict(agent=np.repeat(agents, B), state=cat("state"), dest=cat("dest"),
                    action=cat("action"), reward=cat("reward"), next_agent=cat("next_agent"),
                    next_state=cat("next_state"), next_mask=cat("next_mask"),
                    terminal=cat("terminal"))

    def td_targets(self, batch: dict) -> np.ndarray:
        y = batch["reward"].astype(float).copy()
        live = ~batch["terminal"]
        if live.any():
            nxt = batch["next_agent"][live]
            X = batch["next_state"][live].astype(float)
            emb, _, _ = self.gat.forward_nodes_dedup(self.gat_target, X, self.agent_nodes[nxt])
            qn, _ = qnet_forward(self.q_target, nxt, self.zbits[batch["dest"][live]], emb)
            best = np.max(np.where(batch["next_mask"][live], qn, -np.inf), axis=1)
            y[live] += self.config.discount_rate * best
        return y

    def loss_and_grads(self, batch: dict, y: np.ndarray, train_mode: bool = True) -> np.ndarray:
        """Sum over agents of per-agent MSE; grads accumulated. Returns per-sample errors."""
        agents = batch["agent"]
        X = batch["state"].astype(float)
        emb, gcache, inv = self.gat.forward_nodes_dedup(self.gat_params, X, self.agent_nodes[agents],
                                                        train=train_mode, rng=self.train_rng)
        q, qcache = qnet_forward(self.q_params, agents, self.zbits[batch["dest"]], emb)
        rows = np.arange(len(agents))
        diff = q[rows, batch["action"]] - y
        counts = np.bincount(agents, minlength=self.n_agents)[agents]
        gq = np.zeros_like(q)
        gq[rows, batch["action"]] = 2.0 * diff / counts
        g_emb = qnet_backward(self.q_params, qcache, gq)
        self.gat.backward(self.gat_params, gcache, g_emb, inverse=inv)
        return diff

    def train_tick(self, agents: np.ndarray) -> float:
        cfg = self.config
        agents = np.asarray(agents, dtype=np.int64)
        batch = self._batch(agents)
        y = self.td_targets(batch)
        diff = self.loss_and_grads(batch, y)
        clip_grad_norm(self.q_params, cfg.gradient_clipping_norm, rows=agents)
        adam_step(self.q_params, self.q_adam, rows=agents)
        polyak_update(self.q_target, self.q_params, cfg.tau, rows=agents)
        if self.gat.hops:
            clip_grad_norm(self.gat_params, cfg.gradient_clipping_norm)
            adam_step(self.gat_params, self.gat_adam)
            polyak_update(self.gat_target, self.gat_params, cfg.tau)
        self._version += 1
        loss = float(np.mean(diff ** 2))
        self.losses.append(loss)
        return loss

    # ------------------------------------------------------------ persistence

    def groups(self) -> dict[str, ParamSet]:
        return {"q": self.q_params, "q_target": self.q_target,
                "gat": self.gat_params, "gat_target": self.gat_target}

    def save(self, path: str | Path) -> None:
        meta = {"model": f"AN-h{self.config.hops}",
                "agent_nodes": [int(i) for i in self.agent_nodes],
                "hidden": list(self.config.hidden_sizes)}
        save_checkpoint(path, self.groups(), meta)

    def load(self, path: str | Path) -> None:
        groups, meta = load_checkpoint(path)
        if [int(i) for i in meta.get("agent_nodes", [])] != [int(i) for i in self.agent_nodes]:
            raise ValueError("checkpoint agents do not match this network")
        for name, ps in self.groups().items():
            ps.load_from(groups[name])
        self._version += 1

    def destination_embeddings(self) -> np.ndarray:
        """[N, h0]: each intersection's destination embedding, averaged over agents."""
        A, N = self.n_agents, self.net.n_intersections
        idx = np.repeat(np.arange(A), N)
        z = stacked_linear_forward(self.q_params["embed.W"], self.q_params["embed.b"], idx,
                                   np.tile(self.zbits, (A, 1)))
        return relu(z).reshape(A, N, -1).mean(axis=0)


def dump_embeddings(system: ANSystem, path: str | Path) -> np.ndarray:
    emb = system.destination_embeddings()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["intersection", "x", "y"] + [f"e{j}" for j in range(emb.shape[1])])
        for i, row in enumerate(emb):
            x, y = system.net.coords[i]
            w.writerow([i, x, y] + [repr(float(v)) for v in row])
    return emb


# ---------------------------------------------------------------- tabular variant

class TabularRouter:
    """Table-driven Q-learning over (intersection, destination, slot).

    With ``alpha = gamma = 1`` this is the exact telescoping oracle for AN's
    reward; with ``alpha = 0.5, gamma = 0.99`` and a per-hop update it is
    Q-Routing.  State ignores congestion entirely.
    """

    def __init__(self, net: RoadNetwork, alpha: float = 0.5, gamma: float = 0.99,
                 epsilon: float = 0.0, seed: int = 0, controlled: Sequence[bool] | None = None,
                 init: float = 0.0):
        self.net = net
        self.alpha = alpha
        self.gamma = gamma
        self.epsilon = epsilon
        ctrl = np.asarray(net.controlled if controlled is None else controlled, dtype=bool)
        self.controlled = ctrl
        self.Q = np.full((net.n_intersections, net.n_intersections, net.max_out_degree), float(init))
        self.slot_mask = slot_masks(net)
        self.pending: dict[int, tuple[int, int, int, int]] = {}
        self.rng = np.random.default_rng(seed)
        self.training = True
        self.updates: list[tuple[int, int, int]] = []
        self._fallback: dict = {}

    def _update(self, vc: int, t: int, target_next: float | None) -> None:
        p = self.pending.pop(vc, None)
        if p is None or not self.training:
            return
        node, dest, slot, t0 = p
        r = -float(t - t0)
        target = r if target_next is None else r + self.gamma * target_next
        self.Q[node, dest, slot] += self.alpha * (target - self.Q[node, dest, slot])
        self.updates.append((node, dest, slot))

    def __call__(self, q: RoutingQuery, sim: Simulation) -> RoutingResponse:
        owed = trichotomy(q)
        if owed is not None:
            self._update(q.vc, q.t, None)
            return owed
        if not self.controlled[q.u]:
            return RoutingResponse.next_road(static_next_hop(self.net, self._fallback, q.r_c, q.i_d))
        valid = self.slot_mask[q.r_c]
        qv = self.Q[q.u, q.i_d]
        self._update(q.vc, q.t, float(np.max(qv[valid])))
        choices = np.flatnonzero(valid)
        if self.epsilon > 0 and self.rng.random() < self.epsilon:
            slot = int(choices[self.rng.integers(len(choices))])
        else:
            slot = int(np.argmax(np.where(valid, qv, -np.inf)))
        self.pending[q.vc] = (q.u, q.i_d, slot, q.t)
        return RoutingResponse.next_road(self.net.out_roads[q.u][slot])

    def on_episode_end(self, sim: Simulation) -> None:
        self.pending.clear()
