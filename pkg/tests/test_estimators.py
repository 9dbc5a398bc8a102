import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import toy_dataset
from dom2.datasets import generate_dataset, write_dataset
from dom2.estimators import DOM2, MACQL, DiffusionBC, TrajectoryAugmenter, check_observations
from dom2.exceptions import ConfigurationError, ContractError

TINY = dict(batch_size=8, hidden=8, critic_hidden=8, actor_hidden=8, n_blocks=1, total_steps=10,
            eval_episodes=0, thresholds=[])


@pytest.fixture(scope="module")
def small():
    return generate_dataset("coop_nav_3a3l", "expert", 10, seed=0)


def test_augmenter_fit_transform():
    aug = TrajectoryAugmenter(thresholds=[10, 20])
    out = aug.fit_transform(toy_dataset([5.0, 15.0, 25.0]))
    assert len(out) == 6 and aug.thresholds_ == [10.0, 20.0]
    auto = TrajectoryAugmenter().fit(toy_dataset(list(range(11))))
    assert auto.thresholds_ == [5.0, 7.0, 9.0]
    with pytest.raises(NotFittedError):
        TrajectoryAugmenter().transform(toy_dataset([1.0]))
    with pytest.raises(ConfigurationError):
        TrajectoryAugmenter(thresholds="median").fit(toy_dataset([1.0]))


def test_get_params_and_clone():
    est = DOM2(eta=2.5, seed=3)
    params = est.get_params()
    assert params["eta"] == 2.5 and params["seed"] == 3
    assert clone(est).get_params() == params
    assert est.to_config().algo == "dom2" and DiffusionBC().to_config().effective_eta == 0.0


def test_fit_predict(small, tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(small, path)
    est = DOM2(**TINY).fit(path)
    obs = small.trajectories[0].obs[:4]
    a = est.predict(obs)
    assert a.shape == (4, 3, 2) and np.all(np.abs(a) <= 1)
    assert est.predict(obs[0]).shape == (3, 2)
    with pytest.raises(ContractError):
        est.predict(np.zeros((3, 5)))
    report = est.evaluate(groups=2)
    assert report.env_id == "coop_nav_3a3l" and len(report.returns) == 2


def test_deterministic_predictions_for_macql(small):
    est = MACQL(**TINY).fit(small)
    obs = small.trajectories[0].obs[0]
    np.testing.assert_array_equal(est.predict(obs), est.predict(obs))


def test_predict_requires_fit():
    with pytest.raises(NotFittedError):
        DOM2().predict(np.zeros((3, 14)))


def test_from_checkpoint(small):
    est = DiffusionBC(**TINY).fit(small)
    again = DiffusionBC.from_checkpoint(est.checkpoint_)
    assert again.get_params() == est.get_params()
    obs = small.trajectories[0].obs[0]
    np.testing.assert_array_equal(
        est.predict(obs, rng=np.random.default_rng(0)), again.predict(obs, rng=np.random.default_rng(0))
    )


def test_check_observations():
    arr, single = check_observations([[0.0] * 4] * 2, 2, 4)
    assert single and arr.shape == (1, 2, 4)
    with pytest.raises(ValueError):
        check_observations([[np.nan] * 4] * 2, 2, 4)
