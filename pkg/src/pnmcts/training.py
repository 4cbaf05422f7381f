"""Scenario generation, FIFO baseline, best-so-far archive, curriculum training and evaluation."""

from __future__ import annotations

import logging
import math
import statistics
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .board import (
    EPS,
    N_MAX,
    FAIL_TIME,
    MOVE_SECONDS,
    SOLVED,
    Board,
    EpisodeOutcome,
    RewardParams,
    RowKind,
    conflicts,
    crossing_reward,
    fingerprint,
    from_scenario,
    has_conflict,
    overlay,
)
from .geometry import IntersectionLayout, Platoon, default_layout
from .policynet import AdamState, NetParams, TrainConfig, accumulate_and_step, loss
from .scenario import Scenario
from .search import SearchConfig, Trajectory, greedy_policy_episode, parallel_round, play_episode, short_path_config

logger = logging.getLogger(__name__)


# -- scenarios --------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    platoons: tuple[int, int] = (1, 8)
    speed: tuple[float, float] = (4.0, 5.0)
    distance: tuple[float, float] = (0.0, 15.0)
    vehicles: tuple[int, int] = (1, 4)
    seed: int = 0
    require_feasible: bool = False  # reject boards FIFO cannot fit under t_max

    def desk_scale(self) -> "ScenarioConfig":
        return replace(self, platoons=(1, 4))


class GenerationError(RuntimeError):
    pass


def generate_scenarios(cfg: ScenarioConfig, count: int, layout: IntersectionLayout | None = None,
                       max_attempts: int | None = None) -> list[Scenario]:
    """Sample ``count`` distinct scenarios whose initial board has at least one conflict.

    Each platoon takes a different non-right-turn movement, so a board holds at
    most one platoon per conflicting lane.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    layout = layout or default_layout()
    movements = layout.conflicting_movements()
    lo, hi = cfg.platoons
    if lo < 1 or hi > len(movements) or lo > hi:
        raise ValueError(f"platoon range {cfg.platoons} must lie within [1, {len(movements)}]")
    rng = np.random.default_rng(cfg.seed)
    budget = max_attempts if max_attempts is not None else max(2000, 200 * count)
    seen: set[str] = set()
    out: list[Scenario] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > budget:
            raise GenerationError(f"rejection budget of {budget} attempts exhausted after {len(out)} scenarios")
        n = int(rng.integers(lo, hi + 1))
        picks = rng.choice(len(movements), size=n, replace=False)
        platoons = tuple(
            Platoon(k, movements[m], float(rng.uniform(*cfg.speed)), float(rng.uniform(*cfg.distance)),
                    int(rng.integers(cfg.vehicles[0], cfg.vehicles[1] + 1)))
            for k, m in enumerate(picks)
        )
        board = from_scenario(platoons, layout)
        if not has_conflict(board):
            continue
        fp = fingerprint(board)
        if fp in seen:
            continue
        if cfg.require_feasible and not fifo_schedule(board).solved:
            continue
        seen.add(fp)
        out.append(Scenario(platoons, layout))
    return out


def split_scenarios(scenarios, n_train: int):
    return list(scenarios[:n_train]), list(scenarios[n_train:])


# -- FIFO baseline -------------------------------------------------------------------

def _first_entry(b: Board, row: int) -> float:
    return float(b.entry[row][b.present[row]].min())


def _insert(b: Board, row: int, fixed: list[int], release: float) -> int:
    """Smallest move count that starts ``row`` no earlier than ``release`` and clears ``fixed`` rows."""
    p = b.present[row]
    moves = 0
    first = _first_entry(b, row)
    if release > first + EPS:
        moves = math.ceil((release - first) / MOVE_SECONDS - 1e-9)
    while True:
        e = b.entry[row] + MOVE_SECONDS * moves
        x = b.exit[row] + MOVE_SECONDS * moves
        need = 0.0
        for k in fixed:
            ov = p & b.present[k] & (e < b.exit[k] - EPS) & (b.entry[k] < x - EPS)
            if ov.any():
                need = max(need, float((b.exit[k] - e)[ov].max()))
        if need <= 0.0:
            return moves
        moves += max(1, math.ceil(need / MOVE_SECONDS - 1e-9))


def fifo_board(b: Board) -> Board:
    """Schedule new rows in arrival order, each with the least delay that avoids earlier ones.

    When residual rows exist, new platoons start only after the residual
    schedule has fully completed.
    """
    fixed = [i for i in b.rows_of(RowKind.RESIDUAL) if b.present[i].any()]
    release = max((float(b.exit[i][b.present[i]].max()) for i in fixed), default=0.0)
    order = sorted((i for i in b.rows_of(RowKind.NEW) if b.present[i].any()), key=lambda i: (_first_entry(b, i), i))
    for i in order:
        b = b.shifted(i, _insert(b, i, fixed, release))
        fixed.append(i)
    return b


def fifo_schedule(b: Board, params: RewardParams = RewardParams()) -> EpisodeOutcome:
    """Outcome of the FIFO schedule.  ``steps`` counts delayed platoons."""
    s = fifo_board(b)
    assert not conflicts(s)
    t_cross = s.t_cross()
    delayed = sum(1 for i, m in enumerate(s.moves) if m != b.moves[i])
    if t_cross > params.t_max + EPS:
        return EpisodeOutcome(FAIL_TIME, t_cross, delayed, params.fail_time_value)
    return EpisodeOutcome(SOLVED, t_cross, delayed, crossing_reward(t_cross, delayed, params))


# -- archive --------------------------------------------------------------------------

class BestSoFarArchive:
    """Highest-reward solved trajectory per board fingerprint."""

    def __init__(self):
        self._best: dict[str, Trajectory] = {}

    def offer(self, fp: str, traj: Trajectory) -> bool:
        if not traj.outcome.solved:
            return False
        cur = self._best.get(fp)
        if cur is None or traj.outcome.reward > cur.outcome.reward:
            self._best[fp] = traj
            return True
        return False

    def get(self, fp: str) -> Trajectory | None:
        return self._best.get(fp)

    def __contains__(self, fp):
        return fp in self._best

    def __len__(self):
        return len(self._best)

    def rewards(self) -> dict[str, float]:
        return {k: t.outcome.reward for k, t in self._best.items()}


# -- busy boards -------------------------------------------------------------------------

# share of the resolved schedule already executed when new platoons arrive
BUSY_ELAPSED_FRAC = (0.5, 0.9)


def draw_residual(rng: np.random.Generator, resolved: list[Board],
                  elapsed_frac: tuple[float, float] = BUSY_ELAPSED_FRAC) -> tuple[Board, float]:
    """A random solved board and how far its schedule has run."""
    res = resolved[int(rng.integers(len(resolved)))]
    return res, float(rng.uniform(*elapsed_frac)) * res.t_cross()


def make_busy_board(rng: np.random.Generator, resolved: list[Board], fresh: Board,
                    elapsed_frac: tuple[float, float] = BUSY_ELAPSED_FRAC) -> Board:
    """Overlay ``fresh`` on a randomly chosen solved board whose clock has moved on."""
    res, elapsed = draw_residual(rng, resolved, elapsed_frac)
    return overlay(res, fresh, elapsed)


def make_busy_boards(fresh_boards, resolved: list[Board], seed: int = 0,
                     elapsed_frac: tuple[float, float] = BUSY_ELAPSED_FRAC) -> list[Board]:
    rng = np.random.default_rng(seed)
    return [make_busy_board(rng, resolved, b, elapsed_frac) for b in fresh_boards]


def make_busy_scenarios(scenarios, resolved: list[Board], seed: int = 0,
                        elapsed_frac: tuple[float, float] = BUSY_ELAPSED_FRAC) -> list[Scenario]:
    """Busy versions of ``scenarios``; same draws as :func:`make_busy_boards` with the same seed."""
    rng = np.random.default_rng(seed)
    out = []
    for s in scenarios:
        res, elapsed = draw_residual(rng, resolved, elapsed_frac)
        out.append(Scenario(s.platoons, s.layout, res, elapsed))
    return out


# -- curriculum ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumConfig:
    phase: str = "full"  # clear | busy | full
    clear_iterations: int = 100
    busy_iterations: int = 100
    boards_per_round: int = 8
    resample_prob: float = 0.25
    workers: int = 1
    replay_capacity: int = 4000
    beta: float = 0.01
    beta_anneal_every: int = 300
    elapsed_frac: tuple[float, float] = BUSY_ELAPSED_FRAC
    busy_pool_per_board: int = 2
    updates_per_round: int = 1  # optimizer steps after each search round
    permute_rows: bool = True  # row-order augmentation of training batches
    seed: int = 0
    clear_search: SearchConfig = field(default_factory=lambda: SearchConfig(simulations=400, rollout_depth=0))
    busy_search: SearchConfig = field(default_factory=lambda: SearchConfig(simulations=400, rollout_depth=0))
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.0 <= self.resample_prob <= 1.0:
            raise ValueError("resample_prob must lie in [0, 1]")
        if self.updates_per_round < 1:
            raise ValueError("updates_per_round must be >= 1")
        if self.phase not in ("clear", "busy", "full"):
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass
class IterationMetrics:
    iteration: int
    phase: str
    success_rate: float
    mean_reward: float
    mean_solve_time_s: float
    loss: float
    resampled: int

    def as_row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainingState:
    params: NetParams
    adam: AdamState = field(default_factory=AdamState)
    archive: BestSoFarArchive = field(default_factory=BestSoFarArchive)
    resolved_pool: list[Board] = field(default_factory=list)
    busy_pool: list[Board] = field(default_factory=list)
    replay: deque = field(default_factory=deque)
    rng_state: dict | None = None
    clear_done: int = 0
    busy_done: int = 0
    metrics: list[IterationMetrics] = field(default_factory=list)

    def rng(self, seed: int) -> np.random.Generator:
        g = np.random.default_rng(seed)
        if self.rng_state is not None:
            g.bit_generator.state = self.rng_state
        return g


def permute_rows(batch, rng: np.random.Generator):
    """Shuffle the occupied rows of every example, moving features, mask and policy together.

    A board means the same thing whatever order its rows are listed in, so
    this multiplies the distinct inputs seen in training at no search cost.
    """
    x, masks, pi, z = batch
    n = x.shape[0]
    flags = x[:, -N_MAX:]
    cells = x[:, :-N_MAX].reshape(n, N_MAX, -1)
    perm = np.tile(np.arange(N_MAX), (n, 1))
    for i in range(n):
        occ = np.flatnonzero(flags[i] != 0)
        perm[i, occ] = rng.permutation(occ)
    take = np.arange(n)[:, None], perm
    x = np.concatenate([cells[take].reshape(n, -1), flags[take]], axis=1)
    masks = masks.reshape(n, N_MAX, -1)[take].reshape(n, -1)
    pi = pi.reshape(n, N_MAX, -1)[take].reshape(n, -1)
    return x, masks, pi, z


def _train_step(state: TrainingState, tcfg: TrainConfig, rng: np.random.Generator,
                augment: bool = False) -> float:
    replay = state.replay
    if len(replay) < 2:
        return float("nan")
    bs = min(tcfg.batch_size, len(replay))
    grads, stats, losses = [], [], []
    for _ in range(tcfg.accumulation_steps):
        idx = rng.choice(len(replay), size=bs, replace=False)
        items = [replay[i] for i in idx]
        batch = tuple(np.stack([it[k] for it in items]) for k in range(4))
        if augment:
            batch = permute_rows(batch, rng)
        val, g, s = loss(state.params, batch, tcfg, return_stats=True)
        grads.append(g)
        stats.append(s)
        losses.append(val)
    state.params = accumulate_and_step(state.params, grads, tcfg, state.adam, stats)
    return float(np.mean(losses))


def _iteration(state: TrainingState, boards: list[Board], phase: str, cfg: CurriculumConfig,
               scfg: SearchConfig, tcfg: TrainConfig, rng: np.random.Generator, iteration: int) -> IterationMetrics:
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=len(boards))]
    trajs = parallel_round(boards, state.params, scfg, cfg.workers, seeds)
    examples = []
    resampled = 0
    for b, tr in zip(boards, trajs):
        fp = fingerprint(b)
        if tr.outcome.solved:
            state.archive.offer(fp, tr)
            if phase == "clear" and tr.steps:
                state.resolved_pool.append(tr.final_board())
        examples.extend(tr.examples())
        if not tr.outcome.solved:
            best = state.archive.get(fp)
            if best is not None and rng.random() < cfg.resample_prob:
                examples.extend(best.examples())
                resampled += 1
    state.replay.extend(examples)
    while len(state.replay) > cfg.replay_capacity:
        state.replay.popleft()
    losses = [_train_step(state, tcfg, rng, cfg.permute_rows) for _ in range(cfg.updates_per_round)]
    loss_val = float(np.mean(losses))
    solved = [t for t in trajs if t.outcome.solved]
    return IterationMetrics(
        iteration=iteration,
        phase=phase,
        success_rate=len(solved) / len(trajs),
        mean_reward=float(np.mean([t.outcome.reward for t in trajs])),
        mean_solve_time_s=float(np.mean([t.wall_time for t in solved])) if solved else float("nan"),
        loss=loss_val,
        resampled=resampled,
    )


def _sample(rng, pool, k):
    k = min(k, len(pool))
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]


def run_curriculum(params: NetParams | TrainingState, train_boards: list[Board],
                   cfg: CurriculumConfig = CurriculumConfig(), callback=None) -> TrainingState:
    """Train on clear boards, then on busy overlays of solved boards.

    Passing a :class:`TrainingState` resumes where it stopped; the state
    carries parameters, optimizer moments, pools, archive and RNG state.
    """
    if not train_boards:
        raise ValueError("training pool is empty")
    state = params if isinstance(params, TrainingState) else TrainingState(params)
    rng = state.rng(cfg.seed)
    phases = ["clear", "busy"] if cfg.phase == "full" else [cfg.phase]
    it = state.clear_done + state.busy_done
    for phase in phases:
        if phase == "clear":
            todo = cfg.clear_iterations - state.clear_done if cfg.phase == "full" else cfg.clear_iterations
            tcfg = replace(cfg.train, beta=0.0)
            for _ in range(max(todo, 0)):
                boards = _sample(rng, train_boards, cfg.boards_per_round)
                m = _iteration(state, boards, "clear", cfg, cfg.clear_search, tcfg, rng, it)
                state.clear_done += 1
                it += 1
                state.metrics.append(m)
                if callback:
                    callback(m, state)
        else:
            todo = cfg.busy_iterations - state.busy_done if cfg.phase == "full" else cfg.busy_iterations
            if todo > 0 and not state.busy_pool:
                resolved = state.resolved_pool or [fifo_board(b) for b in train_boards]
                for _ in range(cfg.busy_pool_per_board):
                    for b in train_boards:
                        state.busy_pool.append(make_busy_board(rng, resolved, b, cfg.elapsed_frac))
            for _ in range(max(todo, 0)):
                beta = cfg.beta * 0.5 ** (state.busy_done // cfg.beta_anneal_every)
                tcfg = replace(cfg.train, beta=beta)
                boards = _sample(rng, state.busy_pool, cfg.boards_per_round)
                m = _iteration(state, boards, "busy", cfg, cfg.busy_search, tcfg, rng, it)
                state.busy_done += 1
                it += 1
                state.metrics.append(m)
                if callback:
                    callback(m, state)
    state.rng_state = rng.bit_generator.state
    return state


# -- evaluation -----------------------------------------------------------------------------------

@dataclass
class BoardResult:
    index: int
    fingerprint: str
    solved: bool
    status: str
    t_cross: float
    steps: int
    reward: float
    wall_time: float


@dataclass
class EvaluationReport:
    mode: str
    results: list[BoardResult]

    @property
    def n(self) -> int:
        return len(self.results)

    @property
    def n_solved(self) -> int:
        return sum(r.solved for r in self.results)

    @property
    def success_rate(self) -> float:
        return self.n_solved / self.n if self.n else float("nan")

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r.reward for r in self.results])) if self.results else float("nan")

    def _solved(self, attr):
        return [getattr(r, attr) for r in self.results if r.solved]

    @property
    def mean_solve_time(self) -> float:
        v = self._solved("wall_time")
        return float(np.mean(v)) if v else float("nan")

    @property
    def median_solve_time(self) -> float:
        v = self._solved("wall_time")
        return float(statistics.median(v)) if v else float("nan")

    @property
    def mean_quality(self) -> float:
        v = self._solved("reward")
        return float(np.mean(v)) if v else float("nan")

    @property
    def median_quality(self) -> float:
        v = self._solved("reward")
        return float(statistics.median(v)) if v else float("nan")

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "boards": self.n,
            "solved": self.n_solved,
            "success_rate": self.success_rate,
            "mean_reward": self.mean_reward,
            "mean_solve_time_s": self.mean_solve_time,
            "median_solve_time_s": self.median_solve_time,
            "mean_quality": self.mean_quality,
            "median_quality": self.median_quality,
        }


def evaluate_policy(net, boards, mode: str = "short_path_mcts", search: SearchConfig | None = None,
                    reward: RewardParams = RewardParams(), seed: int = 0) -> EvaluationReport:
    """Success rate, rewards and solve times of a policy on ``boards``.

    ``net_only`` plays the network's argmax action at each step;
    ``short_path_mcts`` plays a short deterministic search per move.
    """
    if mode not in ("net_only", "short_path_mcts"):
        raise ValueError(f"unknown mode {mode!r}")
    search = search or short_path_config(reward=reward)
    results = []
    for i, b in enumerate(boards):
        t0 = time.perf_counter()
        if mode == "net_only":
            tr = greedy_policy_episode(b, net, reward)
        else:
            tr = play_episode(b, net, search, seed + i)
        wall = time.perf_counter() - t0
        o = tr.outcome
        results.append(BoardResult(i, fingerprint(b), o.solved, o.status, o.t_cross, o.steps, o.reward, wall))
    return EvaluationReport(mode, results)


def solve_board(b: Board, net, search: SearchConfig | None = None, seed: int = 0) -> Trajectory:
    """Short-path search schedule for one board."""
    return play_episode(b, net, search or short_path_config(), seed)

