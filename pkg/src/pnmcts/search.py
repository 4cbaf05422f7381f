"""PUCT tree search over boards, episode play and the parallel search round.

Scheduling is a single-player game, so backed-up values are never negated.
Each node keeps per-action statistics (prior, visit count, total value) for
its legal actions only; children are created lazily on first selection.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field, replace

import numpy as np

from .board import (
    ACTION_DIM,
    FAIL_STEPS,
    Board,
    EpisodeOutcome,
    RewardParams,
    apply_index,
    dead_end_outcome,
    encode,
    evaluate,
    legal_actions,
)
from .policynet import NetParams, predict_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    simulations: int = 400
    c_puct: float = 1.5
    max_depth: int = 21  # in board steps from the initial board
    move_time_budget: float | None = None  # seconds of search per move
    rollout_depth: int = 5
    dirichlet_alpha: float = 0.3
    dirichlet_fraction: float = 0.25
    temperature_moves: int = 4
    temperature: float = 1.0
    max_moves: int = 20  # largest delay per action, in 0.1 s units
    reward: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self):
        if self.simulations < 1:
            raise ValueError("simulations must be >= 1")
        if self.rollout_depth < 0:
            raise ValueError("rollout_depth must be >= 0")


def training_config(**kw) -> SearchConfig:
    return replace(SearchConfig(), **kw)


def short_path_config(**kw) -> SearchConfig:
    """Cheap deterministic search used for evaluation: few simulations, greedy rollouts."""
    base = SearchConfig(simulations=100, rollout_depth=5, dirichlet_fraction=0.0, temperature_moves=0)
    return replace(base, **kw)


# -- evaluators -----------------------------------------------------------

class UniformEvaluator:
    """Uniform priors over legal actions and a constant value."""

    def __init__(self, value: float = 0.0):
        self.value = value

    def __call__(self, board: Board, mask: np.ndarray, reward: RewardParams):
        p = mask.astype(float)
        return p / p.sum(), self.value


class NetEvaluator:
    """Inference-mode network with a per-state cache."""

    def __init__(self, params: NetParams, cache_size: int = 20000):
        self.params = params
        self.cache_size = cache_size
        self._cache: dict = {}

    def __call__(self, board: Board, mask: np.ndarray, reward: RewardParams):
        key = board.cache_key
        hit = self._cache.get(key)
        if hit is not None:
            return hit[1], hit[2]
        policy, value = predict_batch(self.params, encode(board, reward)[None, :], mask[None, :])
        if len(self._cache) >= self.cache_size:
            self._cache.clear()
        # hold the base array so its id cannot be reused while cached
        self._cache[key] = (board._entry0, policy[0], float(value[0]))
        return policy[0], float(value[0])


def make_evaluator(net):
    if net is None:
        return UniformEvaluator()
    if isinstance(net, NetParams):
        return NetEvaluator(net)
    return net


# -- tree -------------------------------------------------------------------

class Node:
    __slots__ = ("board", "outcome", "mask", "actions", "P", "N", "W", "children", "visits", "value", "expanded")

    def __init__(self, board: Board, cfg: SearchConfig):
        self.board = board
        self.children: dict[int, Node] = {}
        self.visits = 0
        self.value = None
        self.expanded = False
        self.outcome = evaluate(board, cfg.reward)
        self.mask = None
        self.actions = np.zeros(0, dtype=np.int64)
        if self.outcome is None:
            mask = legal_actions(board, cfg.reward, cfg.max_moves).ravel()
            if not mask.any():
                self.outcome = dead_end_outcome(board, cfg.reward)
            else:
                self.mask = mask
                self.actions = np.flatnonzero(mask)
        n = len(self.actions)
        self.P = np.zeros(n)
        self.N = np.zeros(n)
        self.W = np.zeros(n)

    @property
    def terminal(self) -> bool:
        return self.outcome is not None

    @property
    def Q(self) -> np.ndarray:
        return np.divide(self.W, self.N, out=np.zeros_like(self.W), where=self.N > 0)


def puct_scores(node: Node, c_puct: float) -> np.ndarray:
    total = node.N.sum()
    return node.Q + c_puct * node.P * np.sqrt(max(total, 1.0)) / (1.0 + node.N)


def select(node: Node, cfg: SearchConfig) -> int:
    """Flat action index maximizing the PUCT score; ties go to the lowest index."""
    if not len(node.actions):
        raise ValueError("node has no legal actions")
    return int(node.actions[int(np.argmax(puct_scores(node, cfg.c_puct)))])


class SearchTree:
    def __init__(self, board: Board, evaluator, cfg: SearchConfig, rng: np.random.Generator | None = None,
                 root_noise: bool | None = None):
        self.cfg = cfg
        self.evaluator = evaluator
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.root_noise = cfg.dirichlet_fraction > 0 if root_noise is None else root_noise
        self.root = Node(board, cfg)

    def _add_noise(self, node: Node):
        if not self.root_noise or not len(node.actions):
            return
        eps = self.cfg.dirichlet_fraction
        noise = self.rng.dirichlet([self.cfg.dirichlet_alpha] * len(node.actions))
        node.P = (1 - eps) * node.P + eps * noise

    def _expand(self, node: Node) -> float:
        policy, value = self.evaluator(node.board, node.mask, self.cfg.reward)
        p = policy[node.actions]
        s = p.sum()
        node.P = p / s if s > 0 else np.full(len(p), 1.0 / len(p))
        node.value = value
        node.expanded = True
        if node is self.root:
            self._add_noise(node)
        if self.cfg.rollout_depth > 0:
            return self._rollout(node.board, policy, value)
        return value

    def _rollout(self, board: Board, policy: np.ndarray, value: float) -> float:
        """Greedy short-path rollout under the policy; terminal reward if reached, else value."""
        cfg = self.cfg
        for _ in range(cfg.rollout_depth):
            board = apply_index(board, int(np.argmax(policy)))
            out = evaluate(board, cfg.reward)
            if out is not None:
                return out.reward
            mask = legal_actions(board, cfg.reward, cfg.max_moves).ravel()
            if not mask.any():
                return dead_end_outcome(board, cfg.reward).reward
            policy, value = self.evaluator(board, mask, cfg.reward)
        return value

    def _leaf_value(self, node: Node) -> float:
        if node.value is None:
            _, node.value = self.evaluator(node.board, node.mask, self.cfg.reward)
        return node.value

    def simulate_once(self) -> float:
        cfg = self.cfg
        node = self.root
        path = []
        while True:
            if node.outcome is not None:
                value = node.outcome.reward
                break
            if node.board.step_count >= cfg.max_depth:
                value = self._leaf_value(node)
                break
            if not node.expanded:
                value = self._expand(node)
                break
            pos = int(np.argmax(puct_scores(node, cfg.c_puct)))
            path.append((node, pos))
            child = node.children.get(pos)
            if child is None:
                child = Node(apply_index(node.board, int(node.actions[pos])), cfg)
                node.children[pos] = child
            node = child
        node.visits += 1
        for n, pos in path:
            n.N[pos] += 1
            n.W[pos] += value
            n.visits += 1
        return value

    def advance(self, pos: int) -> Node:
        """Make the child at ``pos`` the new root, keeping its subtree."""
        child = self.root.children.get(pos)
        if child is None:
            child = Node(apply_index(self.root.board, int(self.root.actions[pos])), self.cfg)
        self.root = child
        if child.expanded:
            self._add_noise(child)
        return child


def simulate_once(tree: SearchTree) -> float:
    return tree.simulate_once()


# -- episodes ----------------------------------------------------------------

@dataclass
class Step:
    features: np.ndarray
    mask: np.ndarray
    pi: np.ndarray
    action: int


@dataclass
class Trajectory:
    initial: Board
    steps: list[Step]
    outcome: EpisodeOutcome
    seed: int | None = None
    wall_time: float = 0.0
    error: str | None = None

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    def final_board(self) -> Board:
        b = self.initial
        for a in self.actions:
            b = apply_index(b, a)
        return b

    def examples(self):
        """Training tuples ``(features, mask, pi, z)`` with the episode reward as target."""
        z = self.outcome.reward
        return [(s.features, s.mask, s.pi, z) for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "initial": self.initial.to_dict(),
            "actions": self.actions,
            "pi": [{str(int(i)): float(s.pi[i]) for i in np.flatnonzero(s.pi)} for s in self.steps],
            "outcome": self.outcome.__dict__,
            "seed": self.seed,
            "wall_time": self.wall_time,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict, reward: RewardParams = RewardParams()) -> "Trajectory":
        b = Board.from_dict(data["initial"])
        steps = []
        for a, pi_sparse in zip(data["actions"], data["pi"]):
            pi = np.zeros(ACTION_DIM)
            for k, v in pi_sparse.items():
                pi[int(k)] = v
            steps.append(Step(encode(b, reward), legal_actions(b, reward).ravel(), pi, int(a)))
            b = apply_index(b, a)
        return cls(Board.from_dict(data["initial"]), steps, EpisodeOutcome(**data["outcome"]),
                   data.get("seed"), data.get("wall_time", 0.0), data.get("error"))


def _visit_policy(root: Node) -> np.ndarray:
    w = root.N if root.N.sum() > 0 else root.P
    return w / w.sum()


def play_episode(initial: Board, net, cfg: SearchConfig = SearchConfig(), seed: int | None = 0) -> Trajectory:
    """Play one board to a terminal state, recording visit distributions.

    ``net`` is a :class:`NetParams`, an evaluator callable, or ``None`` for
    uniform priors.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    tree = SearchTree(initial, make_evaluator(net), cfg, rng)
    steps: list[Step] = []
    move = 0
    outcome = tree.root.outcome
    while outcome is None:
        root = tree.root
        if root.board.step_count >= cfg.max_depth:
            outcome = EpisodeOutcome(FAIL_STEPS, root.board.t_cross(), root.board.step_count,
                                     cfg.reward.fail_step_value)
            break
        t0 = time.perf_counter()
        for _ in range(cfg.simulations):
            tree.simulate_once()
            if cfg.move_time_budget is not None and time.perf_counter() - t0 > cfg.move_time_budget:
                break
        if not root.expanded:
            tree.simulate_once()
        local_pi = _visit_policy(root)
        if move < cfg.temperature_moves and cfg.temperature > 0:
            w = local_pi ** (1.0 / cfg.temperature)
            pos = int(rng.choice(len(w), p=w / w.sum()))
        else:
            pos = int(np.argmax(local_pi))
        pi = np.zeros(ACTION_DIM)
        pi[root.actions] = local_pi
        steps.append(Step(encode(root.board, cfg.reward), root.mask.copy(), pi, int(root.actions[pos])))
        tree.advance(pos)
        move += 1
        outcome = tree.root.outcome
    return Trajectory(initial, steps, outcome, seed, time.perf_counter() - start)


def greedy_policy_episode(initial: Board, net, reward: RewardParams = RewardParams(), max_moves: int = 20) -> Trajectory:
    """Play by taking the network's most probable action at every step, without search."""
    start = time.perf_counter()
    evaluator = make_evaluator(net)
    b = initial
    steps = []
    while True:
        out = evaluate(b, reward)
        if out is not None:
            break
        mask = legal_actions(b, reward, max_moves).ravel()
        if not mask.any():
            out = dead_end_outcome(b, reward)
            break
        policy, _ = evaluator(b, mask, reward)
        a = int(np.argmax(policy))
        pi = np.zeros(ACTION_DIM)
        pi[a] = 1.0
        steps.append(Step(encode(b, reward), mask, pi, a))
        b = apply_index(b, a)
    return Trajectory(initial, steps, out, None, time.perf_counter() - start)


# -- parallel round -------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(net, cfg):
    _WORKER["evaluator"] = make_evaluator(net)
    _WORKER["cfg"] = cfg


def _run_task(task):
    index, board, seed = task
    try:
        return index, play_episode(board, _WORKER["evaluator"], _WORKER["cfg"], seed)
    except Exception as exc:  # a failed worker must not sink the round
        logger.exception("episode %d failed", index)
        return index, failed_trajectory(board, _WORKER["cfg"], seed, repr(exc))


def failed_trajectory(board: Board, cfg: SearchConfig, seed, error: str) -> Trajectory:
    out = EpisodeOutcome(FAIL_STEPS, board.t_cross(), board.step_count, cfg.reward.fail_step_value)
    return Trajectory(board, [], out, seed, 0.0, error)


def parallel_round(boards, net, cfg: SearchConfig = SearchConfig(), workers: int = 1,
                   seeds=None, base_seed: int = 0) -> list[Trajectory]:
    """Run one independent episode per board, each on a private tree.

    Every board gets its own seed (``base_seed + i`` unless ``seeds`` is
    given), so results do not depend on how boards are spread over workers.
    Results come back in input order once every episode has finished.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    boards = list(boards)
    if seeds is None:
        seeds = [base_seed + i for i in range(len(boards))]
    tasks = list(zip(range(len(boards)), boards, seeds))
    results: list[Trajectory | None] = [None] * len(boards)
    if workers == 1 or len(boards) <= 1:
        _init_worker(net, cfg)
        for t in tasks:
            i, traj = _run_task(t)
            results[i] = traj
        return results
    try:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(net, cfg)) as pool:
            for i, traj in pool.map(_run_task, tasks):
                results[i] = traj
    except BrokenProcessPool as exc:
        logger.error("worker pool broke: %s", exc)
    for i, r in enumerate(results):
        if r is None:
            results[i] = failed_trajectory(boards[i], cfg, seeds[i], "worker process died")
    return results
