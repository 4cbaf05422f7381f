"""Acceptance suite: one test per criterion, each reporting a PASS or FAIL line.

The desk-scale training run is shared by criteria 7 to 10 and takes the
bulk of the suite's runtime.
"""

import time

import numpy as np
import pytest

from pnmcts.board import (
    ACTION_DIM, FAIL_STEPS, FAIL_TIME, N_MAX, SOLVED, RewardParams, RowKind, apply_index, conflicts, encode,
    evaluate, from_scenario, has_conflict, legal_actions,
)
from pnmcts.geometry import Platoon, default_layout
from pnmcts.policynet import NetConfig, NoLegalAction, TrainConfig, forward, init_params, loss
from pnmcts.search import SearchConfig, parallel_round, play_episode, short_path_config
from pnmcts.simulator import ExperimentSpec, run_experiment, sweep_specs
from pnmcts.training import (
    CurriculumConfig, ScenarioConfig, evaluate_policy, fifo_board, fifo_schedule, generate_scenarios,
    make_busy_boards, run_curriculum,
)

from conftest import crossing_platoons, random_board

pytestmark = pytest.mark.acceptance

# desk-scale setup shared by criteria 7 to 10
DESK = dict(
    platoons=(1, 4), n_train=50, n_test=20, scenario_seed=1, iterations=200,
    net=NetConfig(hidden_layers=4, hidden_width=128), init_seed=123,
    train_sims=100, updates_per_round=8, eval_sims=100, busy_seed=3,
)


def report(results, n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    results.append(line)
    return ok


# -- 1 ------------------------------------------------------------------------------------------

def test_criterion_01_transformation_fidelity(acceptance_log):
    t0 = time.perf_counter()
    board = from_scenario(crossing_platoons(), default_layout())
    # platoon ids are 1-based, board rows 0-based
    got = {(a, i + 1, j + 1) for a, i, j in conflicts(board)}
    want = {("A", 1, 4), ("D", 3, 4)}
    dt = time.perf_counter() - t0
    ok = got == want and dt < 1.0
    report(acceptance_log, 1, ok, f"conflicts={sorted(got)} in {dt:.3f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------------

def _oracle_reward(rows, steps, alpha=0.5, t_max=30.0, s_max=20):
    """Reward from the raw intervals: max exit, then the weighted time and step terms."""
    t_cross = max(t1 for cells in rows for (_, t1) in cells.values())
    return alpha * (1 - t_cross / t_max) + (1 - alpha) * (1 - steps / s_max)


def _free_rows(rng):
    """Random conflict-free rows: every area used by at most one row."""
    areas = list(default_layout().area_ids)
    rng.shuffle(areas)
    n = int(rng.integers(1, 6))
    rows = [{} for _ in range(n)]
    for a in areas[: int(rng.integers(n, len(areas) + 1))]:
        t0 = float(rng.uniform(0, 27))
        rows[int(rng.integers(n))][a] = (t0, t0 + float(rng.uniform(0.1, 2.9)))
    return [r for r in rows if r]


def test_criterion_02_reward_correctness(acceptance_log):
    from pnmcts.board import from_intervals

    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    areas = default_layout().area_ids
    worst = 0.0
    for _ in range(1000):
        rows = _free_rows(rng)
        steps = int(rng.integers(0, 21))
        b = from_intervals(rows, areas, step_count=steps)
        out = evaluate(b)
        assert out is not None and out.status == SOLVED
        worst = max(worst, abs(out.reward - _oracle_reward(rows, steps)))
    late = evaluate(from_intervals([{"A": (0, 4)}, {"B": (25.0, 30.5)}], areas))
    long = evaluate(from_intervals([{"A": (0, 4)}], areas, step_count=21))
    dt = time.perf_counter() - t0
    ok = (worst < 1e-12 and late.status == FAIL_TIME and late.reward == -1.0
          and long.status == FAIL_STEPS and long.reward == -1e-3 and dt < 5.0)
    report(acceptance_log, 2, ok, f"max|err|={worst:.1e}, sentinels ({late.reward}, {long.reward}) in {dt:.2f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------------------

def _numeric(params, batch, tcfg, name, h=1e-6):
    w = params.weights[name]
    g = np.zeros_like(w)
    for i in np.ndindex(w.shape):
        keep = w[i]
        w[i] = keep + h
        up, _ = loss(params, batch, tcfg)
        w[i] = keep - h
        down, _ = loss(params, batch, tcfg)
        w[i] = keep
        g[i] = (up - down) / (2 * h)
    return g


def test_criterion_03_gradient_oracle(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    p = init_params(NetConfig(hidden_layers=3, hidden_width=8), seed=3, dtype=np.float64)
    # larger head weights than the default init so head gradients are not vanishingly small
    p.weights["Wp"] = rng.normal(0, 0.5, p.weights["Wp"].shape)
    p.weights["Wv"] = rng.normal(0, 0.5, p.weights["Wv"].shape)
    n = 6
    x = rng.uniform(-1, 1, (n, p.config.input_dim))
    m = rng.random((n, ACTION_DIM)) < 0.3
    m[:, 0] = True
    pi = rng.random((n, ACTION_DIM)) * m
    pi /= pi.sum(1, keepdims=True)
    z = rng.uniform(-1, 1, n)
    worst = {}
    for beta in (0.0, 0.01):
        tcfg = TrainConfig(beta=beta)
        _, grads = loss(p, (x, m, pi, z), tcfg)
        for name in p.weights:
            num = _numeric(p, (x, m, pi, z), tcfg, name)
            # per-tensor relative error
            err = np.abs(grads[name] - num).max() / max(np.abs(num).max(), 1e-12)
            worst[(beta, name)] = err
    dt = time.perf_counter() - t0
    key = max(worst, key=worst.get)
    ok = worst[key] < 1e-4 and dt < 30
    report(acceptance_log, 3, ok, f"worst rel err {worst[key]:.1e} ({key[1]}, beta={key[0]}) "
                                  f"over {len(worst)} tensors in {dt:.1f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------------------------

def test_criterion_04_mask_soundness(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    params = init_params(NetConfig(), seed=0)
    # scale the policy head so the checked distributions are far from uniform
    params.weights["Wp"] = rng.normal(0, 0.05, params.weights["Wp"].shape).astype(params.dtype)
    checked = skipped = bad_zero = 0
    worst = 0.0
    while checked < 10_000:
        kinds = rng.choice([RowKind.NEW, RowKind.RESIDUAL], size=N_MAX, p=[0.7, 0.3])
        b = random_board(rng, kinds=list(kinds), t_hi=float(rng.uniform(5, 31)))
        mask = legal_actions(b).ravel()
        try:
            policy, _ = forward(params, encode(b), mask)
        except NoLegalAction:
            skipped += 1
            continue
        checked += 1
        bad_zero += int(np.count_nonzero(policy[~mask]))
        worst = max(worst, abs(policy[mask].sum() - 1.0))
    dt = time.perf_counter() - t0
    ok = bad_zero == 0 and worst <= 1e-6 and dt < 30
    report(acceptance_log, 4, ok, f"{checked} boards, nonzero masked={bad_zero}, max|sum-1|={worst:.1e}, "
                                  f"{skipped} all-masked boards raised NoLegalAction, {dt:.1f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------------------------

def _brute_force(b, reward, depth=3, max_moves=5):
    """Best solved outcome over every action sequence of length <= depth with delays 1..max_moves."""
    best = None

    def walk(board, d):
        nonlocal best
        out = evaluate(board, reward)
        if out is not None:
            if out.solved and (best is None or out.reward > best.reward + 1e-12):
                best = out
            return
        if d == depth:
            return
        for a in np.flatnonzero(legal_actions(board, reward, max_moves).ravel()):
            walk(apply_index(board, int(a)), d + 1)

    walk(b, 0)
    return best


def _two_platoon_boards(n, seed):
    lay = default_layout()
    movs = lay.conflicting_movements()
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        i, j = rng.choice(len(movs), 2, replace=False)
        ps = [Platoon(k, m, float(rng.uniform(4, 5)), float(rng.uniform(0, 15)), int(rng.integers(1, 5)))
              for k, m in enumerate((movs[i], movs[j]))]
        b = from_scenario(ps, lay)
        if not has_conflict(b):
            continue
        best = _brute_force(b, RewardParams())
        if best is not None:  # keep boards solvable within three restricted moves
            out.append((b, best))
    return out


def test_criterion_05_search_vs_brute_force(acceptance_log):
    t0 = time.perf_counter()
    boards = _two_platoon_boards(100, seed=5)
    cfg = SearchConfig(simulations=10_000, rollout_depth=0, max_moves=5, max_depth=3,
                       dirichlet_fraction=0.0, temperature_moves=0)
    hits = 0
    for k, (b, best) in enumerate(boards):
        out = play_episode(b, None, cfg, seed=k).outcome
        hits += out.solved and abs(out.t_cross - best.t_cross) <= 0.1 + 1e-9
    dt = time.perf_counter() - t0
    ok = hits >= 95 and dt < 300
    report(acceptance_log, 5, ok, f"{hits}/100 boards within 0.1 s of the exhaustive optimum in {dt:.0f}s")
    assert ok


# -- 6 ------------------------------------------------------------------------------------------

def _fingerprint(trajs):
    return [(t.actions, t.outcome, [s.pi.tobytes() for s in t.steps]) for t in trajs]


def test_criterion_06_parallel_determinism(acceptance_log):
    t0 = time.perf_counter()
    boards = [s.to_board() for s in generate_scenarios(ScenarioConfig(platoons=(2, 4), seed=6), 8)]
    net = init_params(NetConfig(), seed=0)
    cfg = SearchConfig(simulations=30, rollout_depth=2)
    seeds = [100 + 7 * i for i in range(8)]
    sequential = [play_episode(b, net, cfg, seed=s) for b, s in zip(boards, seeds)]
    ref = _fingerprint(sequential)
    same = {w: _fingerprint(parallel_round(boards, net, cfg, workers=w, seeds=seeds)) == ref for w in (1, 2, 8)}
    dt = time.perf_counter() - t0
    ok = all(same.values()) and dt < 120
    report(acceptance_log, 6, ok, f"identical to sequential for workers {same} in {dt:.0f}s")
    assert ok


# -- 7 to 10: desk-scale run --------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_run():
    t0 = time.perf_counter()
    scen = generate_scenarios(ScenarioConfig(platoons=DESK["platoons"], seed=DESK["scenario_seed"]),
                              DESK["n_train"] + DESK["n_test"])
    boards = [s.to_board() for s in scen]
    train, test = boards[:DESK["n_train"]], boards[DESK["n_train"]:]
    busy = make_busy_boards(test, [fifo_board(b) for b in train], seed=DESK["busy_seed"])
    control = init_params(DESK["net"], seed=DESK["init_seed"])
    search = SearchConfig(simulations=DESK["train_sims"], rollout_depth=0)
    half = DESK["iterations"] // 2
    cfg = CurriculumConfig(clear_iterations=half, busy_iterations=DESK["iterations"] - half,
                           updates_per_round=DESK["updates_per_round"], clear_search=search, busy_search=search)
    state = run_curriculum(control, train, cfg)
    train_time = time.perf_counter() - t0
    ev = short_path_config(simulations=DESK["eval_sims"])
    reports = {(kind, who): evaluate_policy(net, bs, "short_path_mcts", ev)
               for kind, bs in (("clear", test), ("busy", busy))
               for who, net in (("trained", state.params), ("control", control))}
    return dict(state=state, test=test, busy=busy, reports=reports, train_time=train_time,
                total_time=time.perf_counter() - t0)


def test_criterion_07_desk_curriculum(acceptance_log, desk_run):
    r = desk_run["reports"]
    rate = {k: v.success_rate for k, v in r.items()}
    ok = (rate["clear", "trained"] >= 0.80 and rate["busy", "trained"] >= 0.70
          and rate["clear", "trained"] > rate["clear", "control"]
          and rate["busy", "trained"] > rate["busy", "control"]
          and desk_run["total_time"] < 1800)
    report(acceptance_log, 7, ok,
           f"clear {rate['clear', 'trained']:.0%} vs control {rate['clear', 'control']:.0%}, "
           f"busy {rate['busy', 'trained']:.0%} vs control {rate['busy', 'control']:.0%}, "
           f"train {desk_run['train_time']:.0f}s, total {desk_run['total_time']:.0f}s")
    assert ok


def test_criterion_08_fifo_dominance(acceptance_log, desk_run):
    t0 = time.perf_counter()
    worse, reductions = [], []
    for kind, boards in (("clear", desk_run["test"]), ("busy", desk_run["busy"])):
        for res, b in zip(desk_run["reports"][kind, "trained"].results, boards):
            if not res.solved:
                continue
            fifo_t = fifo_schedule(b).t_cross
            if res.t_cross > fifo_t + 1e-9:
                worse.append((kind, res.index, round(res.t_cross, 2), round(fifo_t, 2)))
            if kind == "clear":
                reductions.append(100.0 * (fifo_t - res.t_cross) / fifo_t)
    mean_red = float(np.mean(reductions)) if reductions else float("nan")
    dt = time.perf_counter() - t0
    ok = not worse and reductions and mean_red >= 25.0 and dt < 300
    report(acceptance_log, 8, ok, f"{len(worse)} solved boards slower than FIFO {worse[:4]}, "
                                  f"mean clear reduction {mean_red:.1f}% over {len(reductions)} boards")
    assert ok


@pytest.fixture(scope="session")
def grid_sweep(desk_run):
    t0 = time.perf_counter()
    net = desk_run["state"].params
    base = ExperimentSpec(demand_vph=600, horizon=600, warmup=60, seed=0, search_simulations=20)
    results = [run_experiment(s, net) for s in sweep_specs(base)]
    return results, time.perf_counter() - t0


def test_criterion_09_grid_trend(acceptance_log, grid_sweep):
    results, dt = grid_sweep
    att = [r.att for r in results]
    ok_a = att[-1] < 0.5 * att[0]
    ok_b = att[1] >= att[0]
    ok = ok_a and ok_b and dt < 600
    report(acceptance_log, 9, ok, f"ATT scenario1..6 = {[round(a, 1) for a in att]}, "
                                  f"(a) ratio {att[-1] / att[0]:.2f} {'ok' if ok_a else 'not met'}, "
                                  f"(b) single agent {att[1]:.1f} vs fixed {att[0]:.1f} "
                                  f"{'ok' if ok_b else 'not met'}, {dt:.0f}s")
    assert ok


def test_criterion_10_safety_invariant(acceptance_log, grid_sweep):
    results, _ = grid_sweep
    v = {r.name: r.violations for r in results}
    ok = all(n == 0 for n in v.values())
    report(acceptance_log, 10, ok, f"violations at scheduled intersections {v}, "
                                   f"searches {sum(r.searches for r in results)}")
    assert ok
