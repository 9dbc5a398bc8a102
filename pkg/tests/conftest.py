import numpy as np
import pytest
import torch

from dom2.approximators import QNetwork, ScoreNetwork
from dom2.datasets import Dataset, Trajectory
from dom2.rng import AgentRNG
from dom2.schedule import build_schedule


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture
def tiny_score():
    def make(n_agents=2, obs_dim=3, act_dim=2, N=3, hidden=6, n_blocks=1, dropout=0.0, seed=0):
        rng = AgentRNG.from_seed(seed, n_agents)
        return ScoreNetwork(n_agents, obs_dim, act_dim, N, hidden, n_blocks, emb_dim=4, dropout=dropout,
                            final_init_scale=1.0, rng=rng)
    return make


@pytest.fixture
def tiny_q():
    def make(n_agents=2, obs_dim=3, act_dim=2, hidden=6, seed=1):
        return QNetwork(n_agents, obs_dim, act_dim, hidden, final_init_scale=1.0, rng=AgentRNG.from_seed(seed, n_agents))
    return make


@pytest.fixture
def schedule3():
    return build_schedule(3)


def toy_dataset(returns, env_id="coop_nav_3a6l", n_agents=3, obs_dim=20, T=2, seed=0):
    """Synthetic trajectories whose joint return is exactly ``returns[k]``."""
    rng = np.random.default_rng(seed)
    trajs = []
    for k, R in enumerate(returns):
        rewards = np.zeros((T, n_agents))
        rewards[0, 0] = R
        trajs.append(
            Trajectory(
                env_id, k,
                rng.normal(size=(T + 1, n_agents, obs_dim)),
                rng.uniform(-1, 1, size=(T, n_agents, 2)),
                rewards,
                np.array([[False] * n_agents] * (T - 1) + [[True] * n_agents]),
            )
        )
    manifest = {"env_id": env_id, "generator": "synthetic", "episodes": len(returns), "seed": seed,
                "n_agents": n_agents, "obs_dim": obs_dim, "act_dim": 2}
    return Dataset(trajs, manifest)


# acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} -- {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
