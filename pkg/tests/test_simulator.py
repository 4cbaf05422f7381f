import pytest

from pnmcts.board import EPS
from pnmcts.search import SearchConfig, UniformEvaluator
from pnmcts.simulator import (
    ExperimentSpec, FixedTimePlan, NetworkWorld, QueuedVehicle, SimulationError, VehicleRecord, _Car,
    agent_control_cycle, center_outward_order, form_platoons, run_experiment, sweep_specs,
)

CENTER = (0, 0)


def _world(controller="fifo", **kw):
    spec = ExperimentSpec(rows=1, cols=1, demand_vph=0, controllers=(controller,), **kw)
    net = UniformEvaluator() if controller == "pnmcts_agent" else None
    return NetworkWorld(spec, net)


def _add_car(world, side, movement, arrival):
    """Place one vehicle on the incoming link so that it reaches the stop line at ``arrival``."""
    rec = VehicleRecord(len(world.vehicles), 0.0, None, [(CENTER, f"{side}-{movement}")])
    world.vehicles.append(rec)
    world.injected += 1
    link = world.links[(CENTER, side)]
    car = _Car(rec)
    world._enter_link(car, link, arrival - link.length / link.speed)
    return car


def _run_until_exit(world, rec, limit=2000):
    for _ in range(limit):
        world.step()
        if rec.exit is not None:
            return rec.exit
    raise AssertionError("vehicle never exited")


def test_empty_world_only_advances_clock():
    w = _world("fixed_time")
    for _ in range(100):
        w.step()
    assert w.clock == pytest.approx(10.0)
    assert w.vehicles == [] and w.injected == 0 and w.exited == 0


def test_single_vehicle_free_flow_time():
    # 100 m at 5 m/s with nothing else around: 20 s to the (final) stop line
    w = _world("fifo", link_speed=5.0)
    rec = VehicleRecord(0, 0.0, None, [(CENTER, "W-straight")])
    w.vehicles.append(rec)
    w.pending[(CENTER, "W")].append(_Car(rec))
    assert abs(_run_until_exit(w, rec) - 20.0) <= 0.1 + 1e-9
    assert rec.exit >= rec.entry


def test_red_light_wait():
    # W-straight is green during the third phase, effectively 30 s to 42 s
    w = _world("fixed_time")
    rec = VehicleRecord(0, 0.0, None, [(CENTER, "W-straight")])
    w.vehicles.append(rec)
    w.pending[(CENTER, "W")].append(_Car(rec))
    assert _run_until_exit(w, rec) == pytest.approx(30.0)


def test_fixed_time_plan_validation():
    plan = FixedTimePlan()
    assert plan.green(5.0, "N", "straight") == pytest.approx(12.0)
    assert plan.green(13.0, "N", "straight") is None
    assert plan.green(5.0, "E", "left") is None
    with pytest.raises(ValueError):
        FixedTimePlan(cycle=50.0)


def test_form_platoons_examples():
    same = [QueuedVehicle("S-left", 1.0 + 1.4 * k) for k in range(5)]
    assert [p.vehicle_count for p in form_platoons(same)] == [4, 1]
    alt = [QueuedVehicle("S-left" if k % 2 else "N-left", 1.0 + k) for k in range(4)]
    assert [p.vehicle_count for p in form_platoons(alt)] == [1, 1, 1, 1]
    assert form_platoons([]) == []
    gap = [QueuedVehicle("S-left", 0.0), QueuedVehicle("S-left", 3.0)]
    assert [p.vehicle_count for p in form_platoons(gap)] == [1, 1]
    head = form_platoons([QueuedVehicle("E-straight", 4.0)], now=1.0, speed=5.0)[0]
    assert head.distance_to_stop_line == pytest.approx(15.0) and head.speed == 5.0


def test_lone_platoon_is_committed_without_delay():
    w = _world("pnmcts_agent")
    car = _add_car(w, "S", "straight", 2.0)
    c = agent_control_cycle(w, CENTER)
    assert c.method == "clear"
    (_, delay, slots), = c.platoons
    assert delay == 0.0 and slots == [pytest.approx(2.0)]
    assert car.slot == pytest.approx(2.0)


def test_residual_forces_delay():
    # committed platoon holds area A over (0, 5); the new one would use A over (3, 4.5)
    w = _world("pnmcts_agent")
    node = w.intersections[CENTER]
    node.committed.append((0, {"A": (0.0, 5.0)}))
    _add_car(w, "S", "straight", 2.0)
    c = agent_control_cycle(w, CENTER)
    assert c.method in ("search", "fifo_fallback")
    (_, delay, _), = c.platoons
    assert delay >= 2.0 - 1e-9
    pid, cells = node.committed[-1]
    assert cells["A"][0] >= 5.0 - EPS


def _overlaps(committed):
    bad = 0
    for i, (_, a) in enumerate(committed):
        for _, b in committed[i + 1:]:
            for area in set(a) & set(b):
                if a[area][0] < b[area][1] - EPS and b[area][0] < a[area][1] - EPS:
                    bad += 1
    return bad


def test_failed_search_falls_back_to_fifo():
    w = _world("pnmcts_agent")
    for k, (side, turn) in enumerate([("S", "straight"), ("W", "straight"), ("N", "left"), ("E", "left")]):
        _add_car(w, side, turn, 1.0 + 0.3 * k)
    # a zero depth cap makes every search fail at once
    c = agent_control_cycle(w, CENTER, search=SearchConfig(simulations=1, max_depth=0))
    assert c.method == "fifo_fallback"
    assert w.intersections[CENTER].fallbacks == 1
    assert len(c.platoons) == 4
    assert _overlaps(w.intersections[CENTER].committed) == 0


def test_fixed_time_node_rejects_agent_cycle():
    with pytest.raises(SimulationError):
        agent_control_cycle(_world("fixed_time"), CENTER)


def test_agents_need_a_network():
    with pytest.raises(SimulationError):
        NetworkWorld(ExperimentSpec(rows=1, cols=1, controllers=("pnmcts_agent",)))


def test_zero_demand():
    r = run_experiment(ExperimentSpec(rows=1, cols=1, demand_vph=0, horizon=60, warmup=10))
    assert r.tt == 0 and r.att is None and r.row()["ATT"] == ""


def test_determinism_and_conservation():
    spec = ExperimentSpec(controllers=("fixed_time", "fifo", "fixed_time") * 3, horizon=150, warmup=30, seed=4)
    a, b = run_experiment(spec), run_experiment(spec)
    assert a.row() == b.row() and a.link_times == b.link_times
    w = NetworkWorld(spec)
    for _ in range(1500):
        w.step()
        assert w.injected == w.in_network + w.exited
        assert w.count_in_network() == w.in_network
    assert w.violations() == 0


def test_agent_grid_runs_without_violations():
    spec = ExperimentSpec(rows=1, cols=1, controllers=("pnmcts_agent",), horizon=90, warmup=10,
                          demand_vph=900, search_simulations=10)
    r = run_experiment(spec, UniformEvaluator())
    assert r.violations == 0 and r.tt > 0


def test_throughput_saturates():
    tts = [run_experiment(ExperimentSpec(rows=1, cols=1, demand_vph=d, horizon=300, warmup=30)).tt
           for d in (100, 400, 1600, 3200, 6400)]
    assert tts[0] < tts[1] < tts[2]
    assert max(tts[2:]) <= 1.05 * min(tts[2:])


def test_sweep_goes_centre_outward():
    assert center_outward_order(3, 3)[0] == (1, 1)
    specs = sweep_specs(ExperimentSpec())
    assert [s.name for s in specs] == [f"scenario{k}" for k in range(1, 7)]
    counts = [s.controller_list().count("pnmcts_agent") for s in specs]
    assert counts == [0, 1, 3, 5, 7, 9]
    assert specs[1].controller_list()[4] == "pnmcts_agent"


def test_spec_round_trip_and_validation():
    spec = ExperimentSpec(rows=2, cols=2, controllers=("fifo",) * 4, name="x")
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        ExperimentSpec(rows=2, cols=2, controllers=("fifo",))
    with pytest.raises(ValueError):
        ExperimentSpec(controllers=("magic",) * 9)
    with pytest.raises(ValueError):
        ExperimentSpec(horizon=10, warmup=20)
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"rows": 1, "bogus": 2})
