import numpy as np
import pytest
from sklearn.base import clone

from pnmcts.board import FEATURE_DIM, N_MAX
from pnmcts.estimator import BoardFeatures, FIFOScheduler, PNMCTSScheduler
from pnmcts.policynet import CheckpointError, NetConfig, init_params
from pnmcts.training import ScenarioConfig, generate_scenarios

from conftest import two_row_board


@pytest.fixture(scope="module")
def scenarios():
    return generate_scenarios(ScenarioConfig(platoons=(2, 3), seed=8), 6)


def test_features_accept_scenarios_and_boards(scenarios):
    X = BoardFeatures().fit(scenarios).transform(scenarios)
    assert X.shape == (6, FEATURE_DIM)
    Y = BoardFeatures().fit_transform([s.to_board() for s in scenarios])
    assert np.array_equal(X, Y)
    with pytest.raises(TypeError):
        BoardFeatures().fit([1, 2])
    with pytest.raises(ValueError):
        BoardFeatures().fit([])


def test_fifo_scheduler():
    est = FIFOScheduler().fit()
    delays = est.predict([two_row_board((0, 4), (1, 5))])
    assert delays.shape == (1, N_MAX)
    assert delays[0, 1] == pytest.approx(3.0) and delays[0, 0] == 0
    assert est.crossing_times([two_row_board((0, 4), (1, 5))])[0] == pytest.approx(8.0)


def test_scheduler_fit_predict_score(scenarios):
    est = PNMCTSScheduler(hidden_layers=1, hidden_width=8, clear_iterations=1, busy_iterations=1,
                          boards_per_round=2, simulations=3, eval_simulations=30, rollout_depth=2,
                          updates_per_round=2)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(AttributeError):
        est.predict(scenarios)
    est.fit(scenarios)
    assert len(est.metrics_) == 2
    d = est.predict(scenarios)
    assert d.shape == (6, N_MAX)
    solved = ~np.isnan(d).any(axis=1)
    assert np.all(d[solved] >= 0)
    assert est.score(scenarios) == pytest.approx(solved.mean())


def test_scheduler_parameter_checks(scenarios):
    with pytest.raises(ValueError):
        PNMCTSScheduler(simulations=0).fit(scenarios)
    with pytest.raises(ValueError):
        PNMCTSScheduler(resample_prob=2.0).fit(scenarios)


def test_scheduler_warm_start(scenarios, tmp_path):
    net = init_params(NetConfig(hidden_layers=1, hidden_width=4), seed=0)
    est = PNMCTSScheduler(clear_iterations=0, busy_iterations=0, net=net).fit(scenarios)
    assert est.params_.config.hidden_width == 4
    with pytest.raises(FileNotFoundError):
        PNMCTSScheduler(net=str(tmp_path / "none.npz")).fit(scenarios)
    odd = init_params(NetConfig(input_dim=5, hidden_layers=1, hidden_width=4))
    with pytest.raises(CheckpointError):
        PNMCTSScheduler(net=odd).fit(scenarios)
