"""scikit-learn style wrappers around the board solver and the FIFO baseline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .board import FEATURE_DIM, MOVE_SECONDS, N_MAX, RewardParams, encode
from .policynet import NetConfig, TrainConfig, init_params
from .search import SearchConfig, short_path_config
from ._validation import check_boards, check_net, check_positive_int, check_probability
from .training import CurriculumConfig, evaluate_policy, fifo_board, run_curriculum, solve_board


class BoardFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer from boards to network input rows."""

    def fit(self, X, y=None):
        check_boards(X)
        return self

    def transform(self, X):
        return np.stack([encode(b) for b in check_boards(X)])


class FIFOScheduler(BaseEstimator):
    """Arrival-order baseline with the estimator interface."""

    def fit(self, X=None, y=None):
        return self

    def predict(self, X) -> np.ndarray:
        """Delay in seconds per board row, shape ``(n_boards, 16)``."""
        boards = check_boards(X)
        return np.array([np.subtract(fifo_board(b).moves, b.moves) * MOVE_SECONDS for b in boards])

    def crossing_times(self, X) -> np.ndarray:
        return np.array([fifo_board(b).t_cross() for b in check_boards(X)])


class PNMCTSScheduler(BaseEstimator):
    """Platoon scheduler trained by curriculum self-play and applied with short-path search.

    ``fit`` runs the clear then busy curriculum on the given boards.  A network
    passed as ``net`` (parameters or a checkpoint path) is used as the starting
    point; with ``clear_iterations = busy_iterations = 0`` ``fit`` only loads it.
    """

    def __init__(self, hidden_layers=10, hidden_width=512, clear_iterations=100, busy_iterations=100,
                 boards_per_round=8, simulations=50, eval_simulations=100, rollout_depth=5,
                 resample_prob=0.25, learning_rate=1e-3, beta=0.01, updates_per_round=1, permute_rows=True,
                 workers=1, seed=0, net=None):
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.clear_iterations = clear_iterations
        self.busy_iterations = busy_iterations
        self.boards_per_round = boards_per_round
        self.simulations = simulations
        self.eval_simulations = eval_simulations
        self.rollout_depth = rollout_depth
        self.resample_prob = resample_prob
        self.learning_rate = learning_rate
        self.beta = beta
        self.updates_per_round = updates_per_round
        self.permute_rows = permute_rows
        self.workers = workers
        self.seed = seed
        self.net = net

    def _curriculum(self) -> CurriculumConfig:
        search = SearchConfig(simulations=check_positive_int(self.simulations, "simulations"), rollout_depth=0)
        return CurriculumConfig(
            clear_iterations=check_positive_int(self.clear_iterations, "clear_iterations", 0),
            busy_iterations=check_positive_int(self.busy_iterations, "busy_iterations", 0),
            boards_per_round=check_positive_int(self.boards_per_round, "boards_per_round"),
            resample_prob=check_probability(self.resample_prob, "resample_prob"),
            workers=check_positive_int(self.workers, "workers"),
            updates_per_round=check_positive_int(self.updates_per_round, "updates_per_round"),
            permute_rows=bool(self.permute_rows),
            beta=float(self.beta),
            seed=int(self.seed),
            clear_search=search,
            busy_search=search,
            train=TrainConfig(learning_rate=float(self.learning_rate)),
        )

    def _search(self) -> SearchConfig:
        return short_path_config(simulations=check_positive_int(self.eval_simulations, "eval_simulations"),
                                 rollout_depth=check_positive_int(self.rollout_depth, "rollout_depth", 0))

    def fit(self, X, y=None):
        boards = check_boards(X)
        cfg = self._curriculum()
        if self.net is not None:
            params = check_net(self.net, expect=NetConfig())
        else:
            params = init_params(NetConfig(hidden_layers=check_positive_int(self.hidden_layers, "hidden_layers"),
                                           hidden_width=check_positive_int(self.hidden_width, "hidden_width"),
                                           input_dim=FEATURE_DIM), seed=int(self.seed))
        self.state_ = run_curriculum(params, boards, cfg)
        self.params_ = self.state_.params
        self.metrics_ = [m.as_row() for m in self.state_.metrics]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise AttributeError(f"{type(self).__name__} is not fitted yet; call fit first")

    def solve(self, X) -> list:
        """Trajectories found by short-path search, one per board."""
        self._check_fitted()
        search = self._search()
        return [solve_board(b, self.params_, search, seed=int(self.seed) + i) for i, b in enumerate(check_boards(X))]

    def predict(self, X) -> np.ndarray:
        """Delay in seconds per board row, shape ``(n_boards, 16)``; NaN rows mark unsolved boards."""
        out = []
        for tr in self.solve(X):
            if tr.outcome.solved:
                out.append(np.subtract(tr.final_board().moves, tr.initial.moves) * MOVE_SECONDS)
            else:
                out.append(np.full(N_MAX, np.nan))
        return np.array(out)

    def score(self, X, y=None) -> float:
        """Success rate of short-path search on ``X``."""
        self._check_fitted()
        return evaluate_policy(self.params_, check_boards(X), "short_path_mcts", self._search(),
                               RewardParams(), int(self.seed)).success_rate
