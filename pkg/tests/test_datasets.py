import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import toy_dataset
from dom2.datasets import (
    Dataset,
    TransitionTable,
    augment,
    auto_thresholds,
    generate_dataset,
    parse_thresholds,
    read_dataset,
    sample_minibatch,
    write_dataset,
)
from dom2.exceptions import ConfigurationError, ContractError, SchemaError
from dom2.rng import AgentRNG


def test_augment_counting_example():
    ds = toy_dataset([5.0, 15.0, 25.0])
    out = augment(ds, [10, 20])
    assert len(out) == 6
    assert out.multiplicities().tolist() == [1, 2, 3]


def test_augment_empty_and_duplicate_thresholds():
    ds = toy_dataset([5.0, 15.0, 25.0])
    assert augment(ds, []).order == ds.order
    assert augment(toy_dataset([15.0]), [10, 10]).multiplicities().tolist() == [3]


def test_augment_does_not_mutate_input():
    ds = toy_dataset([1.0, 2.0])
    order, manifest = ds.order, dict(ds.manifest)
    out = augment(ds, [0.0])
    assert ds.order == order and ds.manifest == manifest
    assert out.trajectories[0] is ds.trajectories[0]


@settings(max_examples=1000, deadline=None)
@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=12),
    st.lists(st.floats(-100, 100, allow_nan=False), max_size=6),
)
def test_multiplicity_formula(returns, thresholds):
    ds = toy_dataset(returns)
    out = augment(ds, thresholds)
    rets = ds.returns()
    expected = [1 + sum(r >= t for t in thresholds) for r in rets]
    assert out.multiplicities().tolist() == expected


def test_per_agent_mean_return_kind():
    ds = toy_dataset([30.0])  # one agent holds all reward: mean over 3 agents = 10
    assert augment(ds, [11.0], "per-agent-mean").multiplicities().tolist() == [1]
    assert augment(ds, [10.0], "per-agent-mean").multiplicities().tolist() == [2]
    with pytest.raises(ConfigurationError):
        augment(ds, [1.0], "median")


def test_thresholds_parsing():
    assert parse_thresholds("10, 20") == [10.0, 20.0]
    assert parse_thresholds("auto") == "auto"
    assert parse_thresholds("") == []
    with pytest.raises(ConfigurationError):
        parse_thresholds("a,b")
    with pytest.raises(ConfigurationError):
        augment(toy_dataset([1.0]), [float("inf")])


def test_auto_thresholds_are_quantiles():
    ds = toy_dataset(list(range(11)))
    assert auto_thresholds(ds) == [5.0, 7.0, 9.0]


def test_minibatch_single_transition():
    ds = toy_dataset([3.0], T=1)
    b = sample_minibatch(ds, 1, 1, np.random.default_rng(0))
    traj = ds.trajectories[0]
    np.testing.assert_array_equal(b["obs"][0], traj.obs[0, 1])
    np.testing.assert_array_equal(b["next_obs"][0], traj.obs[1, 1])
    np.testing.assert_array_equal(b["actions"][0], traj.actions[0, 1])


def test_minibatch_errors_and_determinism():
    ds = toy_dataset([1.0, 2.0, 3.0])
    with pytest.raises(ContractError):
        sample_minibatch(ds, 3, 4, np.random.default_rng(0))
    with pytest.raises(ContractError):
        TransitionTable(Dataset([], {}))
    b1 = sample_minibatch(ds, 0, 8, np.random.default_rng(4))
    b2 = sample_minibatch(ds, 0, 8, np.random.default_rng(4))
    for k in b1:
        np.testing.assert_array_equal(b1[k], b2[k])
    table = TransitionTable(ds)
    s1, s2 = table.sample(AgentRNG([1, 2, 3]), 5), table.sample(AgentRNG([1, 2, 3]), 5)
    assert all(torch.equal(s1[k], s2[k]) for k in s1)
    assert s1["obs"].shape == (3, 5, 20) and s1["rewards"].shape == (3, 5, 1)


def test_duplicated_trajectory_sampled_proportionally():
    ds = augment(toy_dataset([0.0, 10.0], T=1), [5.0, 5.0])  # multiplicities 1 and 3
    table = TransitionTable(ds)
    rng = np.random.default_rng(123)
    pos = rng.integers(0, len(table), size=100_000)
    rows = table.index[pos]
    counts = np.bincount(rows, minlength=2)
    _, p = stats.chisquare(counts, f_exp=100_000 * np.array([0.25, 0.75]))
    assert p > 0.01


def test_round_trip_plain_and_gzip(tmp_path):
    ds = generate_dataset("coop_nav_3a3l", "medium", 4, seed=3)
    for name in ("d.jsonl", "d.jsonl.gz"):
        write_dataset(ds, tmp_path / name)
        back = read_dataset(tmp_path / name)
        assert back.manifest == ds.manifest
        for a, b in zip(ds, back):
            np.testing.assert_array_equal(a.obs, b.obs)
            np.testing.assert_array_equal(a.rewards, b.rewards)
            assert a.seed == b.seed


def test_generation_is_byte_deterministic(tmp_path):
    for name in ("a.jsonl.gz", "b.jsonl.gz"):
        write_dataset(generate_dataset("coop_nav_3a6l", "expert", 100, seed=1), tmp_path / name)
    assert (tmp_path / "a.jsonl.gz").read_bytes() == (tmp_path / "b.jsonl.gz").read_bytes()


def test_medium_expert_mixture():
    ds = generate_dataset("coop_nav_3a6l", "medium-expert", 100, seed=0)
    assert ds.manifest["mixture"] == {"expert": 50, "medium": 50}
    rets = ds.returns()
    assert rets[:50].mean() > rets[50:].mean()


def test_generation_errors():
    with pytest.raises(ConfigurationError):
        generate_dataset("coop_nav_3a6l", "expert", 0, 0)
    with pytest.raises(ConfigurationError):
        generate_dataset("coop_nav_3a6l", "legendary", 3, 0)


def test_quality_ordering_pinned():
    means = {q: generate_dataset("coop_nav_3a6l", q, 200, seed=0).returns().mean() for q in ("expert", "medium")}
    from dom2.envs import make_env, scripted_policy
    from dom2.evaluation import rollout

    env = make_env("coop_nav_3a6l")
    random_mean = np.mean(rollout(scripted_policy("random", env), env, 200, 0))
    assert means["expert"] > means["medium"] > random_mean
    assert (means["expert"], means["medium"], random_mean) == pytest.approx(PINNED_TIER_MEANS, rel=1e-12)


# measured once (expert, medium, random), 200 episodes, seed 0
PINNED_TIER_MEANS = (232.4176953947325, 193.13959373711023, -69.46086224316012)


def _write_lines(path, lines):
    path.write_text("".join(json.dumps(x) + "\n" for x in lines), encoding="utf-8")


def test_schema_errors(tmp_path):
    ds = toy_dataset([1.0])
    rec = ds.trajectories[0].to_record()
    manifest = {"manifest": ds.manifest}
    cases = {
        "no_manifest": [rec],
        "extra_key": [manifest, {**rec, "extra": 1}],
        "bad_returns": [manifest, {**rec, "returns": [9.0, 0.0, 0.0]}],
        "ragged": [manifest, {**rec, "rewards": rec["rewards"][:1]}],
    }
    for name, lines in cases.items():
        _write_lines(tmp_path / name, lines)
        with pytest.raises(SchemaError):
            read_dataset(tmp_path / name)
    (tmp_path / "garbage").write_text("{not json\n")
    with pytest.raises(SchemaError):
        read_dataset(tmp_path / "garbage")
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "missing.jsonl")


def test_mixed_env_ids_rejected():
    a = toy_dataset([1.0]).trajectories[0]
    b = toy_dataset([1.0], env_id="coop_nav_3a3l").trajectories[0]
    with pytest.raises(SchemaError):
        Dataset([a, b], {})
