"""Discrete-time mesoscopic traffic simulation with a router callback seam.

Each road's speed follows a Greenshields speed-density curve evaluated on the
number of vehicles currently on it.  Vehicles advance ``speed * dt`` per step
and query the router when they reach the end of their road.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .netgraph import HubGraph, Road, RoadNetwork

JAM_DENSITY = 1 / 7.5  # veh / m / lane
MIN_SPEED_FRAC = 0.1

SUCCESS = "success"
FAIL = "fail"
NEXT_ROAD = "next-road"

EN_ROUTE = "en-route"
ARRIVED = "arrived"
FAILED = "failed"


class ProtocolViolation(RuntimeError):
    """A router answered a query with a response the protocol does not allow."""


@dataclass(frozen=True)
class TripSpec:
    vc: int
    origin_road: int
    dest_intersection: int
    depart_time: int
    t_max: float


@dataclass(frozen=True)
class RoutingQuery:
    t: int
    vc: int
    u: int
    r_c: int
    i_d: int
    t_max: float


@dataclass(frozen=True)
class RoutingResponse:
    kind: str
    road: int | None = None

    @classmethod
    def success(cls) -> "RoutingResponse":
        return cls(SUCCESS)

    @classmethod
    def fail(cls) -> "RoutingResponse":
        return cls(FAIL)

    @classmethod
    def next_road(cls, road: int) -> "RoutingResponse":
        return cls(NEXT_ROAD, int(road))


def trichotomy(query: RoutingQuery) -> RoutingResponse | None:
    """Terminal answer owed to ``query``, or None when a next road must be chosen.

    Arrival is checked before the deadline.
    """
    if query.u == query.i_d:
        return RoutingResponse.success()
    if query.t_max < query.t:
        return RoutingResponse.fail()
    return None


class Router(Protocol):
    def __call__(self, query: RoutingQuery, sim: "Simulation") -> RoutingResponse: ...


@dataclass
class SimConfig:
    demand_rate: float = 0.5
    vehicle_cap: int = 200
    max_waiting_vehicles: int = 40
    congestion_speed_factor: float = 0.5
    max_steps: int = 2000
    demand_steps: int | None = None
    trip_deadline: float | None = None
    seed: int = 0


@dataclass
class TripRecord:
    vc: int
    origin_road: int
    dest: int
    depart: int
    t_max: float
    free_flow_time: float
    status: str = EN_ROUTE
    end_time: int | None = None
    first_query_time: int | None = None
    hops: int = 0

    @property
    def travel_time(self) -> int | None:
        if self.status != ARRIVED:
            return None
        return self.end_time - self.depart


@dataclass
class MetricsReport:
    avtt: float | None
    rsr: float | None
    completed: int
    total: int
    dropped: int
    mean_congested_fraction: float
    steps: int
    trips: list[TripRecord] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("trips")
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1))

    def write_trips_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vc", "origin_road", "dest", "depart", "end", "status",
                        "travel_time", "hops", "free_flow_time"])
            for tr in self.trips:
                w.writerow([tr.vc, tr.origin_road, tr.dest, tr.depart, tr.end_time, tr.status,
                            tr.travel_time, tr.hops, tr.free_flow_time])


@dataclass
class StepEvents:
    t: int
    queries: list[tuple[RoutingQuery, RoutingResponse]] = field(default_factory=list)
    spawned: list[int] = field(default_factory=list)
    dropped: int = 0


def edge_speed(road: Road, vehicle_count: int) -> float:
    rho = vehicle_count / (road.length * road.lanes)
    return road.free_flow_speed * max(MIN_SPEED_FRAC, 1.0 - rho / JAM_DENSITY)


def edge_speeds(net: RoadNetwork, counts: np.ndarray) -> np.ndarray:
    rho = counts / (net.lengths * net.lane_counts)
    return net.free_speeds * np.maximum(MIN_SPEED_FRAC, 1.0 - rho / JAM_DENSITY)


class Simulation:
    """One episode of traffic on ``net``.

    Vehicle state lives in parallel numpy arrays (``veh_vc``, ``veh_road``,
    ``veh_pos``) ordered by vehicle id, so routers are always called in
    ascending vehicle order within a step.
    """

    def __init__(self, net: RoadNetwork, config: SimConfig | None = None,
                 hubs: HubGraph | None = None):
        self.net = net
        self.config = config or SimConfig()
        self.hubs = hubs
        self.rng = np.random.default_rng(self.config.seed)
        self.t = 0
        self.trips: list[TripRecord] = []
        self.veh_vc = np.zeros(0, dtype=np.int64)
        self.veh_road = np.zeros(0, dtype=np.int64)
        self.veh_pos = np.zeros(0, dtype=float)
        self.waiting: list[TripSpec] = []
        self.generated = 0
        self.dropped = 0
        self.n_arrived = 0
        self.n_failed = 0
        self._out_pad, self._out_mask = _padded(net.out_roads, net.max_out_degree)
        self._congested_sum = 0.0
        self._steps_run = 0
        self.completed_log: list[tuple[int, float]] = []  # (time, inefficiency)
        self.started_log: list[int] = []
        self.congestion_log: list[float] = []
        self._vic_cache: dict[tuple[int, float], np.ndarray] = {}
        self._refresh_speeds()

    # ------------------------------------------------------------ traffic state

    def counts(self) -> np.ndarray:
        return np.bincount(self.veh_road, minlength=self.net.n_roads).astype(float)

    def _refresh_speeds(self) -> None:
        # road speed is what an entering vehicle would see; a vehicle already on
        # the road is slowed only by the others, so a lone car runs at free flow
        counts = self.counts()
        self.speeds = edge_speeds(self.net, counts)
        self.move_speeds = edge_speeds(self.net, np.maximum(counts - 1.0, 0.0))
        self.congested = self.speeds < self.config.congestion_speed_factor * self.net.free_speeds

    def is_congested(self, road: int) -> bool:
        return bool(self.congested[road])

    def live_travel_times(self) -> np.ndarray:
        return self.net.lengths / self.speeds

    def intersection_state(self, i: int) -> np.ndarray:
        return np.where(self._out_mask[i], self.congested[self._out_pad[i]], False).astype(float)

    def network_state(self) -> np.ndarray:
        """Congestion bits of every intersection's outgoing roads, shape [N * F]."""
        return self.network_state_matrix().reshape(-1)

    def network_state_matrix(self) -> np.ndarray:
        return np.where(self._out_mask, self.congested[self._out_pad], False).astype(float)

    @property
    def active_count(self) -> int:
        return len(self.veh_vc)

    # ------------------------------------------------------------ demand

    def add_trip(self, origin_road: int, dest: int, t_max: float | None = None) -> int:
        """Insert a vehicle at the start of ``origin_road`` at the current time."""
        self.generated += 1
        return self._insert(origin_road, dest, t_max)

    def _insert(self, origin_road: int, dest: int, t_max: float | None) -> int:
        vc = len(self.trips)
        if t_max is None:
            t_max = self._default_t_max(self.t)
        ff = self.net.free_flow_times[origin_road] + self.net.road_to_dest_free_flow[origin_road, dest]
        self.trips.append(TripRecord(vc, origin_road, dest, self.t, t_max, float(ff)))
        self.veh_vc = np.append(self.veh_vc, vc)
        self.veh_road = np.append(self.veh_road, origin_road)
        self.veh_pos = np.append(self.veh_pos, 0.0)
        self.started_log.append(self.t)
        return vc

    def _default_t_max(self, depart: int) -> float:
        if self.config.trip_deadline is not None:
            return depart + self.config.trip_deadline
        return depart + self.config.max_steps

    def sample_od(self) -> tuple[int, int]:
        m = self.net.n_roads
        while True:
            o, d = self.rng.integers(m), self.rng.integers(m)
            dest = self.net.roads[d].tail
            if self.net.roads[o].tail != dest:
                return int(o), int(dest)

    def spawn_demand(self, rate: float | None = None, cap: int | None = None) -> list[int]:
        """Bernoulli arrivals into the waiting queue, then insert while below the cap."""
        cfg = self.config
        rate = cfg.demand_rate if rate is None else rate
        cap = cfg.vehicle_cap if cap is None else cap
        horizon = cfg.demand_steps if cfg.demand_steps is not None else cfg.max_steps
        if self.t <= horizon and rate > 0:
            n_new = int(math.floor(rate))
            if self.rng.random() < rate - n_new:
                n_new += 1
            for _ in range(n_new):
                o, d = self.sample_od()
                if len(self.waiting) >= cfg.max_waiting_vehicles:
                    self.dropped += 1
                    self.generated += 1
                    continue
                self.waiting.append(TripSpec(-1, o, d, self.t, self._default_t_max(self.t)))
                self.generated += 1
        spawned = []
        while self.waiting and self.active_count < cap:
            spec = self.waiting.pop(0)
            spawned.append(self._insert(spec.origin_road, spec.dest_intersection, None))
        return spawned

    # ------------------------------------------------------------ dynamics

    def step(self, router: Router) -> StepEvents:
        net = self.net
        self._refresh_speeds()
        self._congested_sum += float(self.congested.mean())
        self.congestion_log.append(float(self.congested.mean()))
        self._steps_run += 1
        self.veh_pos = self.veh_pos + self.move_speeds[self.veh_road]
        self.t += 1
        events = StepEvents(self.t)

        lengths = net.lengths
        crossed = np.nonzero(self.veh_pos >= lengths[self.veh_road])[0]
        done = np.zeros(len(self.veh_vc), dtype=bool)
        for k in crossed:
            vc = int(self.veh_vc[k])
            trip = self.trips[vc]
            road = int(self.veh_road[k])
            pos = float(self.veh_pos[k])
            while pos >= lengths[road]:
                pos -= lengths[road]
                q = RoutingQuery(self.t, vc, net.roads[road].tail, road, trip.dest, trip.t_max)
                resp = router(q, self)
                self._check(q, resp)
                events.queries.append((q, resp))
                if trip.first_query_time is None:
                    trip.first_query_time = self.t
                if resp.kind == NEXT_ROAD:
                    trip.hops += 1
                    road = resp.road
                    continue
                trip.end_time = self.t
                if resp.kind == SUCCESS:
                    trip.status = ARRIVED
                    self.n_arrived += 1
                    self.completed_log.append((self.t, (self.t - trip.depart) / trip.free_flow_time))
                else:
                    trip.status = FAILED
                    self.n_failed += 1
                done[k] = True
                break
            self.veh_road[k] = road
            self.veh_pos[k] = pos
        if done.any():
            keep = ~done
            self.veh_vc = self.veh_vc[keep]
            self.veh_road = self.veh_road[keep]
            self.veh_pos = self.veh_pos[keep]

        before = self.dropped
        events.spawned = self.spawn_demand()
        events.dropped = self.dropped - before
        return events

    def _check(self, q: RoutingQuery, resp: RoutingResponse) -> None:
        owed = trichotomy(q)
        if owed is not None:
            if resp.kind != owed.kind:
                raise ProtocolViolation(f"query {q} owed {owed.kind}, router said {resp.kind}")
            return
        if resp.kind != NEXT_ROAD or resp.road not in self.net.roads[q.r_c].allowed_next:
            raise ProtocolViolation(f"query {q}: response {resp} is not a legal next hop")

    @property
    def demand_open(self) -> bool:
        cfg = self.config
        horizon = cfg.demand_steps if cfg.demand_steps is not None else cfg.max_steps
        return self.t <= horizon

    def finished(self) -> bool:
        return self.t >= self.config.max_steps or (
            not self.demand_open and self.active_count == 0 and not self.waiting)

    def close(self) -> None:
        """Mark every vehicle still on the road as failed."""
        for vc in self.veh_vc:
            tr = self.trips[int(vc)]
            tr.status = FAILED
            self.n_failed += 1
        self.veh_vc = self.veh_vc[:0]
        self.veh_road = self.veh_road[:0]
        self.veh_pos = self.veh_pos[:0]

    def report(self) -> MetricsReport:
        done = [tr for tr in self.trips if tr.status == ARRIVED]
        total = len(self.trips)
        avtt = float(np.mean([tr.travel_time for tr in done])) if done else None
        rsr = 100.0 * len(done) / total if total else None
        mcf = self._congested_sum / self._steps_run if self._steps_run else 0.0
        return MetricsReport(avtt, rsr, len(done), total, self.dropped, mcf, self.t,
                             list(self.trips))

    # ------------------------------------------------------------ hub features

    def vehicle_xy(self) -> np.ndarray:
        net = self.net
        frac = np.clip(self.veh_pos / net.lengths[self.veh_road], 0.0, 1.0)[:, None]
        head = net.coords[net.heads[self.veh_road]]
        tail = net.coords[net.tails[self.veh_road]]
        return head + frac * (tail - head)

    def vicinity_speed(self, hub: int, r_vic: float) -> float:
        if self.active_count == 0:
            return 1.0
        d = np.linalg.norm(self.vehicle_xy() - self.net.coords[hub], axis=1)
        inside = d <= r_vic
        if not inside.any():
            return 1.0
        roads = self.veh_road[inside]
        return float(np.mean(self.speeds[roads] / self.net.free_speeds[roads]))

    def vicinity_roads(self, hub: int, r_vic: float) -> np.ndarray:
        key = (hub, r_vic)
        if key not in self._vic_cache:
            d = np.linalg.norm(self.net.coords - self.net.coords[hub], axis=1) <= r_vic
            self._vic_cache[key] = np.nonzero(d[self.net.heads] & d[self.net.tails])[0]
        return self._vic_cache[key]

    def congestion_ratio(self, hub: int, r_vic: float) -> float:
        roads = self.vicinity_roads(hub, r_vic)
        if len(roads) == 0:
            return 1.0
        return float(np.mean(self.net.free_speeds[roads] / self.speeds[roads]))

    def system_summary(self) -> tuple[int, float, float, float]:
        """(active vehicles, completed/started, mean trip inefficiency, hub speed spread)."""
        started = len(self.trips)
        throughput = self.n_arrived / started if started else 0.0
        ineff = float(np.mean([x for _, x in self.completed_log])) if self.completed_log else 1.0
        if self.hubs is not None:
            speeds = [self.vicinity_speed(h, self.hubs.r_vic) for h in self.hubs.hubs]
            spread = float(np.std(speeds))
        else:
            spread = 0.0
        return self.active_count, throughput, ineff, spread


def _padded(rows, width: int) -> tuple[np.ndarray, np.ndarray]:
    pad = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, row in enumerate(rows):
        pad[i, :len(row)] = row
        mask[i, :len(row)] = True
    return pad, mask


def run_episode(sim: Simulation, router: Router, max_steps: int | None = None,
                on_step: Callable[[Simulation, StepEvents], None] | None = None) -> MetricsReport:
    """Step until ``max_steps`` (or earlier once demand is closed and the network drained)."""
    if max_steps is not None:
        sim.config.max_steps = max_steps
    while not sim.finished():
        ev = sim.step(router)
        if on_step is not None:
            on_step(sim, ev)
    sim.close()
    end = getattr(router, "on_episode_end", None)
    if end is not None:
        end(sim)
    return sim.report()
