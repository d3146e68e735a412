"""Baseline routers, scenario configuration, experiment runs and reporting.

A scenario is one flat ``key = value`` document.  Keys are normalised
(lower case, spaces and dashes folded to ``_``) so the hyperparameter
names of the AN, GAT and HHAN tables can be pasted verbatim.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .an_agent import ANConfig, ANSystem, TabularRouter, linear_epsilon
from .hhan import HHANConfig, HHANSystem, geometric_epsilon
from .mesosim import (MetricsReport, RoutingQuery, RoutingResponse, SimConfig, Simulation,
                      run_episode, trichotomy)
from .netgraph import HubGraph, RoadNetwork, build_grid, hub_graph_for, load_network, shortest_path
from .tensorcore import ParamSet, load_checkpoint, save_checkpoint

MODELS = ("AN-h0", "AN-h1", "AN-h2", "HHAN", "SPF", "SPFWR", "QR")
LEARNED = {"AN-h0", "AN-h1", "AN-h2", "HHAN", "QR"}
HEAVY_FACTOR = 1.5
TRAIN_SEED_BASE = 10_000


class ConfigError(ValueError):
    """Raised for malformed or inconsistent scenario configuration."""


# ---------------------------------------------------------------- baselines

class SPFRouter:
    """Free-flow shortest path fixed at the first query and followed verbatim."""

    def __init__(self, net: RoadNetwork):
        self.net = net
        self.paths: dict[int, list[int]] = {}
        self._cache: dict[tuple[int, int], tuple[int, ...]] = {}

    def _free_flow_path(self, road: int, dest: int) -> list[int]:
        key = (road, dest)
        if key not in self._cache:
            self._cache[key] = tuple(shortest_path(self.net, self.net.free_flow_times, road, dest))
        return list(self._cache[key])

    def __call__(self, q: RoutingQuery, sim: Simulation) -> RoutingResponse:
        owed = trichotomy(q)
        if owed is not None:
            self.paths.pop(q.vc, None)
            return owed
        path = self.paths.get(q.vc)
        if path is None:
            path = self.paths[q.vc] = self._free_flow_path(q.r_c, q.i_d)
        return RoutingResponse.next_road(path.pop(0))

    def on_episode_end(self, sim: Simulation) -> None:
        self.paths.clear()


class SPFWRRouter(SPFRouter):
    """SPF that re-plans on live travel times once its plan is ``period`` seconds old.

    The first plan is the free-flow one, so ``period = inf`` is exactly SPF.
    """

    def __init__(self, net: RoadNetwork, period: float = 30.0):
        super().__init__(net)
        self.period = period
        self.stamp: dict[int, int] = {}
        self.replans = 0

    def __call__(self, q: RoutingQuery, sim: Simulation) -> RoutingResponse:
        owed = trichotomy(q)
        if owed is not None:
            self.paths.pop(q.vc, None)
            self.stamp.pop(q.vc, None)
            return owed
        path = self.paths.get(q.vc)
        if path is None:
            path = self.paths[q.vc] = self._free_flow_path(q.r_c, q.i_d)
            self.stamp[q.vc] = q.t
        elif q.t - self.stamp[q.vc] >= self.period:
            path = self.paths[q.vc] = shortest_path(self.net, sim.live_travel_times(), q.r_c, q.i_d)
            self.stamp[q.vc] = q.t
            self.replans += 1
        return RoutingResponse.next_road(path.pop(0))

    def on_episode_end(self, sim: Simulation) -> None:
        super().on_episode_end(sim)
        self.stamp.clear()


class QRoutingRouter(TabularRouter):
    """Tabular per-intersection Q over (destination, next road) with -dT reward."""

    def groups(self) -> dict[str, ParamSet]:
        ps = ParamSet()
        ps.add("Q", self.Q)
        self.Q = ps["Q"]
        return {"q": ps}

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.groups(), {"model": "QR"})

    def load(self, path: str | Path) -> None:
        groups, _ = load_checkpoint(path)
        self.Q = np.array(groups["q"]["Q"], dtype=float)


def spf_router(net: RoadNetwork) -> SPFRouter:
    return SPFRouter(net)


def spfwr_router(net: RoadNetwork, period: float = 30.0) -> SPFWRRouter:
    return SPFWRRouter(net, period)


def q_routing_router(net: RoadNetwork, alpha: float = 0.5, gamma: float = 0.99,
                     seed: int = 0) -> QRoutingRouter:
    return QRoutingRouter(net, alpha=alpha, gamma=gamma, epsilon=1.0, seed=seed)


# ---------------------------------------------------------------- configuration

def normalize_key(key: str) -> str:
    return re.sub(r"[\s\-]+", "_", key.strip().lower())


@dataclass
class ScenarioConfig:
    # network
    network: str = ""              # path to a network file; empty means grid
    rows: int = 5
    cols: int = 6
    edge_len: float = 100.0
    speed: float = 13.89
    lanes: int = 1
    # demand and episodes
    demand_rate: float = 6.0
    demand_scale: float = 1.0
    heavy_traffic: bool = False
    vehicle_cap: int = 200
    max_waiting_vehicles: int = 40
    congestion_speed_factor: float = 0.5
    demand_steps: int = 200
    max_steps: int = 500
    trip_deadline: float = 0.0     # 0 means episode end
    # experiment
    model: str = "AN-h1"
    train_episodes: int = 800
    eval_seeds: tuple[int, ...] = tuple(range(50))
    seed: int = 0
    spfwr_period: float = 30.0
    qr_alpha: float = 0.5
    qr_gamma: float = 0.99
    # AN and GAT tables
    learning_rate: float = 0.01
    optimizer_eps: float = 1e-4
    batch_size: int = 64
    gradient_clipping_norm: float = 5.0
    buffer_size: int = 10000
    num_new_exp_to_learn: int = 1
    tau: float = 0.01
    discount_rate: float = 0.99
    linear_hidden_units_size: tuple[int, ...] = ()   # empty means the per-hop default
    epsilon_decay_episodes: int = 600
    num_heads_per_layer: int = 3
    dropout: float = 0.6
    layer_0_output_dimension: int = 7
    layer_1_output_dimension: int = 10
    intersection_state_dimension: int = 4
    # HHAN table
    num_hubs: int = 4
    hub_agent_dim: int = 64
    z_order_embedding_dim: int = 8
    lr: float = 5e-4
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
    mixing_lr: float = 5e-4
    gce_size: int = 10
    gce_max_sim_time: int = 100
    clip_grad_norm: float = 10.0
    cost_reward: bool = True

    # table entries that name fixed choices of this implementation
    FIXED = {"optimizer": "adam", "batch_norm": "false", "add_skip_connection": "false",
             "bias": "true"}
    # table entries that are recorded but superseded by epsilon_decay_episodes
    IGNORED = {"epsilon_decay_rate_denom", "stop_exploration_episode"}
    ALIASES = {"num_episodes": "train_episodes", "max_steps_per_episode": "max_steps",
               "max_vehicles": "vehicle_cap"}

    @property
    def effective_rate(self) -> float:
        return self.demand_rate * self.demand_scale * (HEAVY_FACTOR if self.heavy_traffic else 1.0)

    @property
    def hops(self) -> int:
        return int(self.model.split("-h")[1]) if self.model.startswith("AN-h") else 0

    def train_seed(self, episode: int) -> int:
        return TRAIN_SEED_BASE + 1_000_000 * self.seed + episode

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {', '.join(MODELS)}, got {self.model!r}")
        if not self.network and (self.rows < 2 or self.cols < 2):
            raise ConfigError("grid needs rows >= 2 and cols >= 2")
        positive = ("edge_len", "speed", "max_steps", "vehicle_cap", "batch_size", "buffer_size",
                    "qmix_batch_size", "gce_size", "gce_max_sim_time", "num_hubs")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.demand_rate < 0 or self.demand_scale < 0:
            raise ConfigError("demand_rate and demand_scale must be non-negative")
        if not 0 < self.demand_steps <= self.max_steps:
            raise ConfigError("demand_steps must lie in (0, max_steps]")
        if self.train_episodes < 0:
            raise ConfigError("train_episodes must be non-negative")
        if not self.eval_seeds:
            raise ConfigError("eval_seeds is empty")
        if any(s >= TRAIN_SEED_BASE or s < 0 for s in self.eval_seeds):
            raise ConfigError(f"eval_seeds must lie in [0, {TRAIN_SEED_BASE}) to stay disjoint "
                              "from training seeds")
        for name in ("dropout", "tau", "discount_rate", "gamma", "polyak", "epsilon_start",
                     "epsilon_end", "epsilon_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.intersection_state_dimension != 4 and not self.network:
            raise ConfigError("grid intersections have out-degree 4")

    # ---- text round trip

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        values: dict[str, object] = {}
        defaults = cls()
        names = set(cls.field_names())
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            key = normalize_key(key)
            key = cls.ALIASES.get(key, key)
            if key in cls.IGNORED:
                continue
            if key in cls.FIXED:
                if val.strip().lower() != cls.FIXED[key]:
                    raise ConfigError(f"line {lineno}: {key} is fixed to {cls.FIXED[key]}")
                continue
            if key not in names:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _coerce(getattr(defaults, key), val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = []
        for name in self.field_names():
            v = getattr(self, name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _coerce(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        body = text.strip("[]() ")
        if not body:
            return ()
        if ".." in body:                       # inclusive range "a..b"
            lo, hi = body.split("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(x) for x in body.split(","))
    return text


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ScenarioConfig.from_text(text)


# ---------------------------------------------------------------- model assembly

def build_network(cfg: ScenarioConfig) -> RoadNetwork:
    if cfg.network:
        return load_network(cfg.network)
    return build_grid(cfg.rows, cfg.cols, cfg.edge_len, cfg.speed, cfg.lanes)


def sim_config(cfg: ScenarioConfig, seed: int) -> SimConfig:
    return SimConfig(demand_rate=cfg.effective_rate, vehicle_cap=cfg.vehicle_cap,
                     max_waiting_vehicles=cfg.max_waiting_vehicles,
                     congestion_speed_factor=cfg.congestion_speed_factor,
                     max_steps=cfg.max_steps, demand_steps=cfg.demand_steps,
                     trip_deadline=cfg.trip_deadline or None, seed=seed)


def an_config(cfg: ScenarioConfig) -> ANConfig:
    return ANConfig(hops=cfg.hops, hidden=cfg.linear_hidden_units_size or None,
                    learning_rate=cfg.learning_rate, optimizer_eps=cfg.optimizer_eps,
                    batch_size=cfg.batch_size, buffer_size=cfg.buffer_size,
                    gradient_clipping_norm=cfg.gradient_clipping_norm, tau=cfg.tau,
                    discount_rate=cfg.discount_rate, num_new_exp_to_learn=cfg.num_new_exp_to_learn,
                    layer_dims=(cfg.layer_0_output_dimension, cfg.layer_1_output_dimension),
                    num_heads_per_layer=cfg.num_heads_per_layer, dropout=cfg.dropout,
                    epsilon_start=cfg.epsilon_start, epsilon_end=cfg.epsilon_end,
                    epsilon_decay_episodes=cfg.epsilon_decay_episodes, seed=cfg.seed)


def hhan_config(cfg: ScenarioConfig) -> HHANConfig:
    names = {f.name for f in dataclasses.fields(HHANConfig)}
    return HHANConfig(**{n: getattr(cfg, n) for n in names})


@dataclass
class Scenario:
    """A configured network with its hub graph (when the model needs one) and router."""
    config: ScenarioConfig
    net: RoadNetwork
    hubs: HubGraph | None
    model: object

    def simulation(self, seed: int) -> Simulation:
        return Simulation(self.net, sim_config(self.config, seed), hubs=self.hubs)

    def epsilon(self, episode: int) -> float:
        c = self.config
        if c.model == "HHAN":
            return geometric_epsilon(episode, c.epsilon_start, c.epsilon_decay, c.epsilon_end)
        return linear_epsilon(episode, c.epsilon_start, c.epsilon_end, c.epsilon_decay_episodes)


def make_scenario(cfg: ScenarioConfig, net: RoadNetwork | None = None) -> Scenario:
    cfg.validate()
    net = net if net is not None else build_network(cfg)
    # only HHAN needs hubs; other models must work on networks without hub candidates
    hubs = hub_graph_for(net, cfg.num_hubs, seed=cfg.seed) if cfg.model == "HHAN" else None
    if cfg.model == "SPF":
        model = spf_router(net)
    elif cfg.model == "SPFWR":
        model = spfwr_router(net, cfg.spfwr_period)
    elif cfg.model == "QR":
        model = q_routing_router(net, cfg.qr_alpha, cfg.qr_gamma, seed=cfg.seed)
    elif cfg.model == "HHAN":
        model = HHANSystem(net, hubs, hhan_config(cfg))
    else:
        model = ANSystem(net, an_config(cfg))
    return Scenario(cfg, net, hubs, model)


def params_digest(model) -> str:
    """SHA-256 over every parameter array of a learned model (empty string otherwise)."""
    groups = getattr(model, "groups", None)
    if groups is None:
        return ""
    h = hashlib.sha256()
    for gname, ps in sorted(groups().items()):
        for name in ps.names():
            arr = np.ascontiguousarray(ps[name], dtype=np.float64)
            h.update(f"{gname}/{name}{arr.shape}".encode())
            h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- training and evaluation

@dataclass
class EpisodeLog:
    episode: int
    avtt: float | None
    rsr: float | None
    loss: float | None
    epsilon: float


def _loss_count(model) -> int:
    if isinstance(model, ANSystem):
        return len(model.losses)
    if isinstance(model, HHANSystem):
        return len(model.update_log)
    return 0


def _losses_since(model, start: int) -> list[float]:
    if isinstance(model, ANSystem):
        return model.losses[start:]
    if isinstance(model, HHANSystem):
        return [x[2] for x in model.update_log[start:]]
    return []


def set_mode(model, training: bool, epsilon: float) -> None:
    if hasattr(model, "training"):
        model.training = training
    if hasattr(model, "epsilon"):
        model.epsilon = epsilon


def train(scn: Scenario, episodes: int | None = None,
          callback: Callable[[EpisodeLog], None] | None = None,
          start_episode: int = 0) -> list[EpisodeLog]:
    """Run training episodes numbered from ``start_episode`` (exploration and seeds follow the number)."""
    cfg = scn.config
    model = scn.model
    curve: list[EpisodeLog] = []
    if cfg.model not in LEARNED:
        return curve
    n = cfg.train_episodes if episodes is None else episodes
    on_step = getattr(model, "after_step", None)
    for ep in range(start_episode, start_episode + n):
        eps = scn.epsilon(ep)
        set_mode(model, True, eps)
        start = _loss_count(model)
        rep = run_episode(scn.simulation(cfg.train_seed(ep)), model, on_step=on_step)
        losses = _losses_since(model, start)
        log = EpisodeLog(ep, rep.avtt, rep.rsr, float(np.mean(losses)) if losses else None, eps)
        curve.append(log)
        if callback is not None:
            callback(log)
    return curve


def evaluate(scn: Scenario, seeds: Sequence[int] | None = None) -> list[MetricsReport]:
    """Frozen greedy evaluation; parameters are hash-checked before and after."""
    cfg = scn.config
    seeds = cfg.eval_seeds if seeds is None else seeds
    model = scn.model
    set_mode(model, False, 0.0)
    before = params_digest(model)
    reports = []
    for s in seeds:
        if cfg.model in ("SPF", "SPFWR"):
            router = make_scenario(cfg, scn.net).model
        else:
            router = model
        reports.append(run_episode(scn.simulation(s), router))
    if params_digest(model) != before:
        raise RuntimeError("evaluation mutated model parameters")
    return reports


def median_avtt(reports: Sequence[MetricsReport]) -> float:
    vals = [r.avtt for r in reports if r.avtt is not None]
    return float(np.median(vals)) if vals else math.inf


def mean_rsr(reports: Sequence[MetricsReport]) -> float:
    vals = [r.rsr for r in reports if r.rsr is not None]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class RunReport:
    config: str
    curve: list[dict]
    evaluation: list[dict]
    checkpoint_sha256: str
    wall_clock: float = 0.0
    model: str = ""

    @property
    def median_avtt(self) -> float:
        vals = [e["avtt"] for e in self.evaluation if e["avtt"] is not None]
        return float(np.median(vals)) if vals else math.inf

    @property
    def mean_rsr(self) -> float:
        vals = [e["rsr"] for e in self.evaluation if e["rsr"] is not None]
        return float(np.mean(vals)) if vals else 0.0

    def fingerprint(self) -> str:
        """Hash of everything except wall-clock time."""
        doc = self.to_dict()
        doc.pop("wall_clock")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def read_json(cls, path: str | Path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))


def run_experiment(cfg: ScenarioConfig, out_dir: str | Path | None = None,
                   callback: Callable[[EpisodeLog], None] | None = None) -> tuple[RunReport, Scenario]:
    t0 = time.perf_counter()
    scn = make_scenario(cfg)
    curve = train(scn, callback=callback)
    reports = evaluate(scn)
    evaluation = [dict(seed=int(s), **r.summary()) for s, r in zip(cfg.eval_seeds, reports)]
    report = RunReport(cfg.to_text(), [dataclasses.asdict(c) for c in curve], evaluation,
                       params_digest(scn.model), time.perf_counter() - t0, cfg.model)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "report.json")
        write_training_log(out / "training_log.csv", curve)
        if hasattr(scn.model, "save"):
            scn.model.save(out / "checkpoint.json")
    return report, scn


def write_training_log(path: str | Path, curve: Sequence[EpisodeLog]) -> None:
    with open(path, "w") as fh:
        fh.write("episode,mean_loss,epsilon,avtt,rsr\n")
        for c in curve:
            fh.write(f"{c.episode},{'' if c.loss is None else repr(c.loss)},{c.epsilon!r},"
                     f"{'' if c.avtt is None else repr(c.avtt)},{'' if c.rsr is None else repr(c.rsr)}\n")


# ---------------------------------------------------------------- comparison

def percent_improvement(avtt: float, baseline: float) -> float:
    """How much lower ``avtt`` is than ``baseline``, in percent of the baseline."""
    return 100.0 * (baseline - avtt) / baseline


@dataclass
class ComparisonRow:
    method: str
    median_avtt: float
    mean_rsr: float
    improvement: dict[str, float] = field(default_factory=dict)


def compare(results: Mapping[str, RunReport | Sequence[MetricsReport]]) -> list[ComparisonRow]:
    summary = {}
    for name, res in results.items():
        if isinstance(res, RunReport):
            summary[name] = (res.median_avtt, res.mean_rsr)
        else:
            summary[name] = (median_avtt(res), mean_rsr(res))
    rows = []
    for name, (avtt, rsr) in summary.items():
        imp = {other: percent_improvement(avtt, base) for other, (base, _) in summary.items()
               if other != name and math.isfinite(base) and base > 0}
        rows.append(ComparisonRow(name, avtt, rsr, imp))
    return rows


def format_table(rows: Sequence[ComparisonRow]) -> str:
    names = [r.method for r in rows]
    head = f"{'method':<8} {'AVTT':>9} {'RSR':>7}" + "".join(f" {'vs ' + n:>10}" for n in names)
    out = [head]
    for r in rows:
        cells = "".join(f" {'' if n == r.method else format(r.improvement.get(n, math.nan), '+.2f') + '%':>10}"
                        for n in names)
        out.append(f"{r.method:<8} {r.median_avtt:>9.2f} {r.mean_rsr:>7.2f}{cells}")
    return "\n".join(out)


def mann_kendall(series: Sequence[float]) -> tuple[float, float]:
    """(Kendall tau against time, two-sided p-value) of a sequence; NaNs dropped."""
    x = np.asarray([np.nan if v is None else v for v in series], dtype=float)
    t = np.arange(len(x))
    keep = np.isfinite(x)
    res = stats.kendalltau(t[keep], x[keep])
    return float(res.statistic), float(res.pvalue)


def episode_means(curve: Sequence[EpisodeLog | dict], window: int = 10) -> list[float]:
    """Mean training AVTT over consecutive blocks of ``window`` episodes."""
    vals = [c["avtt"] if isinstance(c, dict) else c.avtt for c in curve]
    vals = np.array([np.nan if v is None else v for v in vals], dtype=float)
    n = len(vals) // window
    return [float(np.nanmean(vals[i * window:(i + 1) * window])) for i in range(n)]
