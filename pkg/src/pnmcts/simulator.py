"""Fixed-tick point-queue traffic world for single intersections and grids.

Vehicles enter at boundary links with Poisson arrivals, pick a uniform
random turn at each intersection and leave the network after crossing the
stop line of their last intersection.  A vehicle travels a link at the free
flow speed, then waits in a per-movement point queue at the stop line.  A
link stores at most ``length / 7`` vehicles, counting vehicles that have
been granted entry but not yet crossed into it.

Three controllers are available per intersection:

* ``fixed_time``: a four-phase signal plan with saturation headway,
* ``fifo``: platoon scheduling with the arrival-order baseline,
* ``pnmcts_agent``: platoon scheduling with short-path tree search, falling
  back to the arrival-order baseline whenever search fails.

Scheduled intersections release every vehicle at its committed stop-line
time.  Each crossing is checked against the occupancy of the collision areas
by vehicles of other platoons.
"""

from __future__ import annotations

import bisect
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .board import EPS, MOVE_SECONDS, N_MAX, N_NEW_MAX, RowKind, from_intervals, has_conflict
from .geometry import IntersectionLayout, Platoon, default_layout, project_occupancy
from .search import SearchConfig, make_evaluator, play_episode, short_path_config

logger = logging.getLogger(__name__)

TICK = MOVE_SECONDS
VEHICLE_SPACING = 7.0  # metres per stopped vehicle, and head-to-head inside a platoon
VEHICLE_LENGTH = 5.0
CONTROLLERS = ("fixed_time", "fifo", "pnmcts_agent")

_DELTA = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}
_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
_LEFT = {"N": "W", "W": "S", "S": "E", "E": "N"}
_RIGHT = {v: k for k, v in _LEFT.items()}
TURNS = ("left", "straight", "right")


class SimulationError(RuntimeError):
    pass


def heading_after(heading: str, turn: str) -> str:
    if turn == "left":
        return _LEFT[heading]
    if turn == "right":
        return _RIGHT[heading]
    return heading


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class FixedTimePlan:
    """Cyclic signal plan.  Each phase is ``(approaches, turns, duration)``; the
    last ``lost_time`` seconds of every phase are all-red."""

    cycle: float = 60.0
    phases: tuple = (
        (("N", "S"), ("straight", "right"), 15.0),
        (("N", "S"), ("left",), 15.0),
        (("E", "W"), ("straight", "right"), 15.0),
        (("E", "W"), ("left",), 15.0),
    )
    lost_time: float = 3.0
    saturation_headway: float = 2.0
    offset: float = 0.0

    def __post_init__(self):
        total = sum(p[2] for p in self.phases)
        if abs(total - self.cycle) > 1e-9:
            raise ValueError(f"phase durations sum to {total}, cycle is {self.cycle}")
        if any(p[2] <= self.lost_time for p in self.phases):
            raise ValueError("every phase must outlast its lost time")

    def green(self, t: float, approach: str, turn: str) -> float | None:
        """End of the current effective green for ``(approach, turn)`` at time ``t``, or None if red."""
        u = (t - self.offset) % self.cycle
        start = 0.0
        for approaches, turns, duration in self.phases:
            if start <= u < start + duration:
                end = start + duration - self.lost_time
                if approach in approaches and turn in turns and u < end:
                    return t + (end - u)
                return None
            start += duration
        return None


@dataclass(frozen=True)
class ExperimentSpec:
    rows: int = 3
    cols: int = 3
    demand_vph: float = 600.0  # per boundary entrance
    controllers: tuple = ()  # row-major controller names; empty means all fixed_time
    horizon: float = 600.0
    warmup: float = 60.0
    seed: int = 0
    link_length: float = 100.0
    link_speed: float = 10.0
    crossing_speed: float = 5.0
    decision_interval: float = 2.0
    lookahead: float = 3.0
    max_platoon: int = 4
    platoon_headway: float = 2.0
    plan: FixedTimePlan = field(default_factory=FixedTimePlan)
    search_simulations: int = 30
    solve_budget_s: float | None = None  # wall-clock limit per solve; breaks determinism when set
    name: str = ""

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one intersection")
        if self.horizon <= self.warmup:
            raise ValueError("horizon must exceed warmup")
        if self.demand_vph < 0:
            raise ValueError("demand must be nonnegative")
        ctl = self.controller_list()
        if len(ctl) != self.rows * self.cols:
            raise ValueError(f"expected {self.rows * self.cols} controllers, got {len(ctl)}")
        bad = [c for c in ctl if c not in CONTROLLERS]
        if bad:
            raise ValueError(f"unknown controller {bad[0]!r}")

    def controller_list(self) -> tuple:
        return tuple(self.controllers) if self.controllers else ("fixed_time",) * (self.rows * self.cols)

    @property
    def uses_agents(self) -> bool:
        return "pnmcts_agent" in self.controller_list()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "plan"}
        d["controllers"] = list(self.controller_list())
        p = self.plan
        d["plan"] = {"cycle": p.cycle, "phases": [[list(a), list(t), dur] for a, t, dur in p.phases],
                     "lost_time": p.lost_time, "saturation_headway": p.saturation_headway, "offset": p.offset}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        plan = data.pop("plan", None)
        if plan is not None:
            plan = dict(plan)
            if "phases" in plan:
                plan["phases"] = tuple((tuple(a), tuple(t), float(d)) for a, t, d in plan["phases"])
            data["plan"] = FixedTimePlan(**plan)
        if "controllers" in data:
            data["controllers"] = tuple(data["controllers"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**data)


def center_outward_order(rows: int, cols: int) -> list[tuple[int, int]]:
    """Intersections sorted by Manhattan distance from the grid centre, then row-major."""
    cr, cc = (rows - 1) / 2, (cols - 1) / 2
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    return sorted(cells, key=lambda rc: (abs(rc[0] - cr) + abs(rc[1] - cc), rc))


def sweep_specs(base: ExperimentSpec, agent_counts=(0, 1, 3, 5, 7, 9), order=None) -> list[ExperimentSpec]:
    """Scenarios with the fixed-time core progressively replaced by agents, centre outward."""
    order = list(order) if order is not None else center_outward_order(base.rows, base.cols)
    specs = []
    for k, n in enumerate(agent_counts, start=1):
        agents = set(map(tuple, order[:n]))
        ctl = tuple("pnmcts_agent" if (r, c) in agents else "fixed_time"
                    for r in range(base.rows) for c in range(base.cols))
        specs.append(replace(base, controllers=ctl, name=f"scenario{k}"))
    return specs


# -- world state ---------------------------------------------------------------------

@dataclass
class VehicleRecord:
    id: int
    entry: float
    exit: float | None = None
    route: list = field(default_factory=list)  # [((row, col), movement key), ...]


class _Car:
    __slots__ = ("rec", "leg", "arrival", "link", "link_enter", "slot", "platoon")

    def __init__(self, rec: VehicleRecord):
        self.rec = rec
        self.leg = 0
        self.arrival = math.inf
        self.link = None
        self.link_enter = 0.0
        self.slot = None
        self.platoon = None

    @property
    def movement_key(self) -> str:
        return self.rec.route[self.leg][1]


class _Link:
    def __init__(self, lid: str, length: float, speed: float):
        self.id = lid
        self.length = length
        self.speed = speed
        self.capacity = max(1, int(length // VEHICLE_SPACING))
        self.count = 0
        self.reserved = 0
        self.times: list[float] = []

    def free(self) -> int:
        return self.capacity - self.count - self.reserved


class _Lane:
    __slots__ = ("key", "approach", "turn", "waiting", "ready", "downstream")

    def __init__(self, key, approach, turn, downstream):
        self.key = key
        self.approach = approach
        self.turn = turn
        self.waiting: list[_Car] = []  # not yet granted, sorted by arrival
        self.ready = -math.inf  # earliest stop-line time for the next grant
        self.downstream = downstream  # _Link, or None when the movement leaves the grid


@dataclass
class Commitment:
    """Schedule granted by one control cycle."""

    time: float
    intersection: tuple
    method: str  # clear | search | fifo | fifo_fallback | none
    platoons: list = field(default_factory=list)  # (label, delay s, [stop-line times])


class _Intersection:
    def __init__(self, pos, controller: str, layout: IntersectionLayout):
        self.pos = pos
        self.controller = controller
        self.layout = layout
        self.lanes: dict[str, _Lane] = {}
        self.granted: list = []  # heap-ordered (slot, seq, car)
        self.committed: list = []  # (platoon id, {area: (t0, t1)} absolute)
        self.occupancy: list = []  # (area, t0, t1, platoon id) from executed crossings
        self.violations = 0
        self.cycles = 0
        self.fallbacks = 0
        self.searches = 0


class NetworkWorld:
    """Grid of intersections advanced in fixed ticks."""

    def __init__(self, spec: ExperimentSpec, net=None, layout: IntersectionLayout | None = None,
                 search: SearchConfig | None = None):
        if spec.uses_agents and net is None:
            raise SimulationError("agent intersections need a trained network")
        self.spec = spec
        self.layout = layout or default_layout()
        self.clock = 0.0
        self.ticks = 0
        self.rng = np.random.default_rng(spec.seed)
        self.evaluator = make_evaluator(net) if spec.uses_agents else None
        self.search = search or short_path_config(simulations=spec.search_simulations)
        self.reward = self.search.reward
        self.vehicles: list[VehicleRecord] = []
        self.injected = 0
        self.exited = 0
        self.commitments: list[Commitment] = []
        self._seq = 0
        self._platoon_seq = 0
        self._build()

    # construction
    def _build(self):
        s = self.spec
        ctl = s.controller_list()
        self.intersections: dict[tuple, _Intersection] = {}
        for r in range(s.rows):
            for c in range(s.cols):
                self.intersections[(r, c)] = _Intersection((r, c), ctl[r * s.cols + c], self.layout)
        self.links: dict[tuple, _Link] = {}  # (pos, approach side) -> incoming link
        for (r, c) in self.intersections:
            for side in "NESW":
                self.links[((r, c), side)] = _Link(f"{r},{c}:{side}", s.link_length, s.link_speed)
        keys = {m.key for m in self.layout.movements}
        for (r, c), node in self.intersections.items():
            for side in "NESW":
                heading = _OPPOSITE[side]
                for turn in TURNS:
                    key = f"{side}-{turn}"
                    if key not in keys:
                        raise SimulationError(f"layout lacks movement {key}")
                    out = heading_after(heading, turn)
                    nxt = self._neighbor((r, c), out)
                    down = self.links[(nxt, _OPPOSITE[out])] if nxt is not None else None
                    node.lanes[key] = _Lane(key, side, turn, down)
        self.entrances = []
        for (r, c) in self.intersections:
            for side in "NESW":
                if self._neighbor((r, c), side) is None:
                    self.entrances.append(((r, c), side))
        self.pending: dict = {e: deque() for e in self.entrances}
        rate = s.demand_vph / 3600.0
        self._next_arrival = {e: (self.rng.exponential(1.0 / rate) if rate > 0 else math.inf) for e in self.entrances}

    def _neighbor(self, pos, heading):
        dr, dc = _DELTA[heading]
        r, c = pos[0] + dr, pos[1] + dc
        return (r, c) if (r, c) in self.intersections else None

    def _route(self, pos, side) -> list:
        route = []
        heading = _OPPOSITE[side]
        while pos is not None:
            turn = TURNS[int(self.rng.integers(3))] if len(route) < 4 * len(self.intersections) else "straight"
            route.append((pos, f"{_OPPOSITE[heading]}-{turn}"))
            heading = heading_after(heading, turn)
            pos = self._neighbor(pos, heading)
        return route

    # accounting
    @property
    def in_network(self) -> int:
        return self.injected - self.exited

    def count_in_network(self) -> int:
        return sum(l.count for l in self.links.values())

    def violations(self, controllers=("fifo", "pnmcts_agent")) -> int:
        return sum(n.violations for n in self.intersections.values() if n.controller in controllers)

    # vehicle movement
    def _enter_link(self, car: _Car, link: _Link, t: float):
        link.count += 1
        car.link = link
        car.link_enter = t
        car.arrival = t + link.length / link.speed
        pos, key = car.rec.route[car.leg]
        lane = self.intersections[pos].lanes[key]
        arr = [x.arrival for x in lane.waiting]
        lane.waiting.insert(bisect.bisect_right(arr, car.arrival), car)

    def _cross(self, node: _Intersection, car: _Car, t: float, lane: _Lane):
        link = car.link
        link.count -= 1
        link.times.append(t - car.link_enter)
        self._record_occupancy(node, car, t)
        car.leg += 1
        car.slot = None
        if lane.downstream is None:
            car.rec.exit = t
            self.exited += 1
            car.link = None
            return
        if node.controller != "fixed_time":
            lane.downstream.reserved -= 1
        self._enter_link(car, lane.downstream, t)

    def _record_occupancy(self, node: _Intersection, car: _Car, t: float):
        """Check the crossing vehicle's area intervals against other platoons', then store them."""
        key = car.rec.route[car.leg][1]
        mv = self.layout.movement(key)
        if not mv.area_sequence:
            return
        v = self.spec.crossing_speed
        node.occupancy = [o for o in node.occupancy if o[2] > t - EPS]
        tag = car.platoon if car.platoon is not None else ("veh", car.rec.id)
        for area, s in mv.area_sequence:
            t0 = t + s / v
            t1 = t + (s + VEHICLE_LENGTH + self.layout.extent(area)) / v
            for a, u0, u1, other in node.occupancy:
                if a == area and other != tag and t0 < u1 - EPS and u0 < t1 - EPS:
                    node.violations += 1
                    if node.controller != "fixed_time":
                        logger.error("area %s overlap at %s, t=%.2f", area, node.pos, t)
            node.occupancy.append((area, t0, t1, tag))

    # controllers
    def _fixed_time(self, node: _Intersection, t0: float, t1: float):
        plan = self.spec.plan
        for lane in node.lanes.values():
            while lane.waiting:
                car = lane.waiting[0]
                t = max(car.arrival, lane.ready, t0)
                if t >= t1:
                    break
                end = plan.green(t, lane.approach, lane.turn)
                if end is None or t >= end:
                    break
                if lane.downstream is not None and lane.downstream.free() <= 0:
                    break
                lane.waiting.pop(0)
                lane.ready = t + plan.saturation_headway
                self._cross(node, car, t, lane)

    def _release(self, node: _Intersection, t1: float):
        while node.granted and node.granted[0][0] < t1:
            slot, _, car, lane = node.granted.pop(0)
            self._cross(node, car, slot, lane)

    def _grant(self, node: _Intersection, car: _Car, lane: _Lane, slot: float, platoon: int):
        car.slot = slot
        car.platoon = platoon
        if lane.downstream is not None:
            lane.downstream.reserved += 1
        self._seq += 1
        item = (slot, self._seq, car, lane)
        keys = [(g[0], g[1]) for g in node.granted]
        node.granted.insert(bisect.bisect_right(keys, (slot, self._seq)), item)

    # stepping
    def _inject(self, t0: float, t1: float):
        rate = self.spec.demand_vph / 3600.0
        for e in self.entrances:
            while self._next_arrival[e] < t1:
                ta = self._next_arrival[e]
                rec = VehicleRecord(len(self.vehicles), ta, None, self._route(*e))
                self.vehicles.append(rec)
                self.pending[e].append(_Car(rec))
                self._next_arrival[e] = ta + self.rng.exponential(1.0 / rate)
            link = self.links[e]
            while self.pending[e] and link.free() > 0:
                car = self.pending[e].popleft()
                self.injected += 1
                self._enter_link(car, link, max(car.rec.entry, t0))

    def step(self) -> "NetworkWorld":
        """Advance one tick."""
        t0 = self.clock
        t1 = (self.ticks + 1) * TICK
        self._inject(t0, t1)
        interval = max(1, round(self.spec.decision_interval / TICK))
        decide = self.ticks % interval == 0
        for node in self.intersections.values():
            if node.controller == "fixed_time":
                self._fixed_time(node, t0, t1)
            else:
                if decide:
                    agent_control_cycle(self, node.pos)
                self._release(node, t1)
        self.ticks += 1
        self.clock = t1
        if self.count_in_network() != self.in_network:
            raise SimulationError(
                f"conservation broken at t={self.clock:.1f}: injected {self.injected}, exited {self.exited}, "
                f"on links {self.count_in_network()}")
        return self


def step(world: NetworkWorld) -> NetworkWorld:
    return world.step()


# -- platoons and scheduling -------------------------------------------------------------

def _groups(queue, max_size: int, headway: float) -> list[list[int]]:
    groups: list[list[int]] = []
    for i, car in enumerate(queue):
        if groups:
            last = groups[-1]
            prev = queue[last[-1]]
            if (len(last) < max_size and _movement_of(car) == _movement_of(prev)
                    and car.arrival - prev.arrival <= headway + EPS):
                last.append(i)
                continue
        groups.append([i])
    return groups


def _movement_of(car):
    return getattr(car, "movement", None) or car.movement_key


def form_platoons(queue, now: float = 0.0, max_size: int = 4, headway: float = 2.0, speed: float = 5.0,
                  layout: IntersectionLayout | None = None) -> list[Platoon]:
    """Group consecutive same-movement vehicles within ``headway`` seconds into platoons.

    Queue items carry ``movement`` (a key such as ``"S-left"``) and ``arrival``
    (stop-line time at free flow).  Distance comes from the head vehicle.
    """
    layout = layout or default_layout()
    out = []
    for k, g in enumerate(_groups(list(queue), max_size, headway)):
        head = queue[g[0]]
        d = speed * max(0.0, head.arrival - now)
        out.append(Platoon(k, layout.movement(_movement_of(head)), speed, d, len(g)))
    return out


@dataclass
class QueuedVehicle:
    movement: str
    arrival: float


def _residual_rows(node: _Intersection, now: float) -> list[dict]:
    keep, rows = [], []
    for pid, cells in node.committed:
        clipped = {a: (max(t0 - now, 0.0), t1 - now) for a, (t0, t1) in cells.items() if t1 - now > EPS}
        if clipped:
            keep.append((pid, cells))
            rows.append(clipped)
    node.committed = keep
    return rows


def agent_control_cycle(world: NetworkWorld, pos, net=None, search: SearchConfig | None = None) -> Commitment:
    """Grant stop-line times to the platoons about to reach one scheduled intersection.

    Platoons arriving within the lookahead are placed on a board on top of the
    residual schedule (already committed platoons, clipped to the clock).  The
    board is solved by tree search at agent intersections and by the
    arrival-order baseline at ``fifo`` intersections; a failed or overlong
    search falls back to the baseline.  Right turns cross no collision area and
    are granted at once.
    """
    node = world.intersections[tuple(pos)]
    if node.controller == "fixed_time":
        raise SimulationError(f"intersection {node.pos} is signal controlled")
    spec, layout = world.spec, world.layout
    evaluator = make_evaluator(net) if net is not None else world.evaluator
    search = search or world.search
    now = world.clock
    v = spec.crossing_speed
    gap = VEHICLE_SPACING / v
    node.cycles += 1
    result = Commitment(now, node.pos, "none")

    residual = _residual_rows(node, now)
    candidates = []  # (lane, cars, platoon)
    for key, lane in node.lanes.items():
        if not lane.waiting:
            continue
        room = lane.downstream.free() if lane.downstream is not None else spec.max_platoon
        cars = [c for c in lane.waiting if c.arrival <= now + spec.lookahead + EPS]
        if not cars or room <= 0:
            continue
        first = _groups(cars, min(spec.max_platoon, room), spec.platoon_headway)[0]
        cars = [cars[i] for i in first]
        # head time at which every follower can keep the platoon spacing
        head = max(max(c.arrival - k * gap for k, c in enumerate(cars)), lane.ready, now)
        if lane.turn == "right" or not layout.movement(key).area_sequence:
            _commit(world, node, lane, cars, head, None, result)
            continue
        candidates.append((lane, cars, head))

    candidates = candidates[:max(0, min(N_NEW_MAX, N_MAX - len(residual)))]
    if not candidates:
        return _finish(world, result)
    platoons = [Platoon(i, layout.movement(lane.key), v, v * (head - now), len(cars))
                for i, (lane, cars, head) in enumerate(candidates)]
    new_rows = [{a: (t0, t1) for a, t0, t1 in project_occupancy(p, layout)} for p in platoons]
    kinds = [RowKind.RESIDUAL] * len(residual) + [RowKind.NEW] * len(new_rows)
    board = from_intervals(residual + new_rows, layout.area_ids, kinds=kinds)

    final, method = board, "clear"
    if has_conflict(board):
        if node.controller == "pnmcts_agent":
            node.searches += 1
            started = time.perf_counter()
            tr = play_episode(board, evaluator, search, seed=spec.seed)
            overlong = spec.solve_budget_s is not None and time.perf_counter() - started > spec.solve_budget_s
            if tr.outcome.solved and not overlong:
                final, method = tr.final_board(), "search"
            else:
                logger.info("search %s at %s t=%.1f, using fifo", "timed out" if overlong else "failed",
                            node.pos, now)
                node.fallbacks += 1
                final, method = _fifo(board), "fifo_fallback"
        else:
            final, method = _fifo(board), "fifo"
    result.method = method
    for i, (lane, cars, head) in enumerate(candidates):
        row = len(residual) + i
        delay = final.moves[row] * MOVE_SECONDS
        _commit(world, node, lane, cars, head + delay, final.row_intervals(row), result)
    return _finish(world, result)


def _fifo(board):
    from .training import fifo_board

    return fifo_board(board)


def _commit(world, node, lane, cars, head, cells, result):
    gap = VEHICLE_SPACING / world.spec.crossing_speed
    world._platoon_seq += 1
    pid = world._platoon_seq
    slots = []
    for k, car in enumerate(cars):
        lane.waiting.remove(car)
        slot = head + k * gap
        world._grant(node, car, lane, slot, pid)
        slots.append(slot)
    lane.ready = slots[-1] + gap
    if cells:
        now = world.clock
        node.committed.append((pid, {a: (t0 + now, t1 + now) for a, (t0, t1) in cells.items()}))
    result.platoons.append((f"{lane.key}#{pid}", head - min(c.arrival for c in cars[:1]), slots))


def _finish(world, result):
    if result.platoons:
        world.commitments.append(result)
    return result


# -- experiments -----------------------------------------------------------------------

@dataclass
class ExperimentResult:
    name: str
    seed: int
    att: float | None
    tt: int
    link_times: dict
    injected: int
    in_network: int
    violations: int  # at scheduled (fifo or agent) intersections
    searches: int
    fallbacks: int
    wall_time: float

    def row(self) -> dict:
        return {"spec": self.name, "seed": self.seed, "ATT": "" if self.att is None else round(self.att, 4),
                "TT": self.tt, "injected": self.injected, "in_network": self.in_network,
                "violations": self.violations, "searches": self.searches, "fallbacks": self.fallbacks}


def run_experiment(spec: ExperimentSpec, net=None, layout: IntersectionLayout | None = None,
                   search: SearchConfig | None = None) -> ExperimentResult:
    """Run one world to the horizon and report ATT, TT and per-link mean travel times.

    ATT averages over vehicles that entered after the warmup and exited before
    the horizon; TT counts every vehicle that exited before the horizon.
    """
    started = time.perf_counter()
    world = NetworkWorld(spec, net, layout, search)
    n_ticks = int(round(spec.horizon / TICK))
    for _ in range(n_ticks):
        world.step()
    done = [v for v in world.vehicles if v.exit is not None]
    measured = [v.exit - v.entry for v in done if v.entry >= spec.warmup]
    links = {l.id: float(np.mean(l.times)) for l in world.links.values() if l.times}
    nodes = world.intersections.values()
    return ExperimentResult(
        name=spec.name,
        seed=spec.seed,
        att=float(np.mean(measured)) if measured else None,
        tt=len(done),
        link_times=links,
        injected=world.injected,
        in_network=world.in_network,
        violations=world.violations(),
        searches=sum(n.searches for n in nodes),
        fallbacks=sum(n.fallbacks for n in nodes),
        wall_time=time.perf_counter() - started,
    )
