import math

import pytest
import torch

from dom2.approximators import grad_check
from dom2.critic import CriticPair, cql_loss, critic_update, logsumexp, td_target
from dom2.exceptions import ConfigurationError, ContractError, DivergenceError
from dom2.rng import AgentRNG


class ConstQ(torch.nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c
        self.p = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.training = False

    def forward(self, o, a, n_stat_rows=None):
        return torch.full((*a.shape[:2], 1), self.c, dtype=a.dtype) + 0 * self.p


def _batch(n_agents=2, S=6, obs_dim=3, act_dim=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, dtype=torch.float64, generator=g)
    return {
        "obs": r(n_agents, S, obs_dim),
        "actions": torch.rand(n_agents, S, act_dim, dtype=torch.float64, generator=g) * 2 - 1,
        "rewards": r(n_agents, S, 1),
        "next_obs": r(n_agents, S, obs_dim),
        "dones": (torch.rand(n_agents, S, 1, generator=g) < 0.3).to(torch.float64),
    }


def _const_pair(c=2.5, **kw):
    policy = lambda o, rng: torch.zeros(*o.shape[:2], 2, dtype=o.dtype)
    return CriticPair(ConstQ(c), ConstQ(c), ConstQ(c), ConstQ(c), policy, **kw)


def _net_pair(tiny_q, **kw):
    q1, q2 = tiny_q(seed=1), tiny_q(seed=2)
    t1, t2 = tiny_q(seed=3).eval(), tiny_q(seed=4).eval()
    policy = lambda o, rng: torch.tanh(o[..., :2])
    return CriticPair(q1, q2, t1, t2, policy, **kw)


def test_logsumexp_stable_and_exact():
    x = torch.tensor([[1000.0, 1000.0], [-1000.0, -1000.0]], dtype=torch.float64)
    torch.testing.assert_close(logsumexp(x), torch.tensor([1000 + math.log(2), -1000 + math.log(2)], dtype=torch.float64))
    y = torch.randn(4, 7, dtype=torch.float64)
    torch.testing.assert_close(logsumexp(y, dim=1), torch.logsumexp(y, dim=1), rtol=1e-14, atol=1e-14)


def test_constant_q_regulariser_equals_log_m():
    for M in (1, 3, 10):
        pair = _const_pair(c=-1.7, M=M)
        _, diag = cql_loss(pair, _batch(), AgentRNG([0, 1]))
        torch.testing.assert_close(diag["penalty"], torch.full((2,), math.log(M), dtype=torch.float64), rtol=0, atol=1e-12)


def test_subtract_log_m_option_zeroes_constant_penalty():
    pair = _const_pair(c=4.0, M=10, subtract_log_m=True)
    _, diag = cql_loss(pair, _batch(), AgentRNG([0, 1]))
    assert float(diag["penalty"].abs().max()) < 1e-12


def test_gamma_zero_target_is_reward(tiny_q):
    pair = _net_pair(tiny_q, gamma=0.0)
    b = _batch()
    y = td_target(pair, b["rewards"], b["next_obs"], b["dones"], AgentRNG([0, 1]))
    assert torch.equal(y, b["rewards"])


def test_done_masks_bootstrap():
    pair = _const_pair(c=10.0, gamma=0.5)
    b = _batch()
    y = td_target(pair, b["rewards"], b["next_obs"], b["dones"], AgentRNG([0, 1]))
    torch.testing.assert_close(y, b["rewards"] + (1 - b["dones"]) * 5.0, rtol=0, atol=1e-14)


def test_target_in_train_mode_is_rejected(tiny_q):
    pair = _net_pair(tiny_q)
    pair.q1_target.train()
    b = _batch()
    with pytest.raises(ContractError):
        td_target(pair, b["rewards"], b["next_obs"], b["dones"], AgentRNG([0, 1]))


def test_zeta_zero_is_pure_td_bitwise(tiny_q):
    pair = _net_pair(tiny_q, zeta=0.0)
    b = _batch()
    loss, diag = cql_loss(pair, b, AgentRNG([0, 1]))
    y = td_target(pair, b["rewards"], b["next_obs"], b["dones"], AgentRNG([0, 1]))
    td = torch.stack([((q(b["obs"], b["actions"]) - y) ** 2).mean(dim=(1, 2)) for q in pair.online]).mean(dim=0).sum()
    assert loss.item() == td.item()
    assert torch.equal(diag["td_loss"], diag["critic_loss"])


def test_cql_loss_grad_check(tiny_q):
    pair = _net_pair(tiny_q, zeta=5.0, M=4)
    b = _batch()
    for q in pair.online:
        q.train()
    params = [(f"q{k}.{n}", p) for k, q in enumerate(pair.online) for n, p in q.named_parameters()]
    report = grad_check(None, lambda _: cql_loss(pair, b, AgentRNG([5, 6]))[0], n_params=80, params=params)
    assert report.passed, report


def test_penalty_pushes_random_actions_down(tiny_q):
    pair = _net_pair(tiny_q, zeta=50.0, M=8)
    opt = torch.optim.Adam(pair.parameters(), lr=1e-2)
    rng = AgentRNG([0, 1])
    b = _batch(S=32)
    for _ in range(60):
        diag = critic_update(pair, b, opt, rng)
    assert bool((diag["mean_q_random"] < diag["mean_q_data"]).all())


def test_critic_update_detects_divergence(tiny_q):
    pair = _net_pair(tiny_q)
    b = _batch()
    b["rewards"] = b["rewards"] * float("nan")
    params = [p.clone() for p in pair.parameters()]
    with pytest.raises(DivergenceError):
        critic_update(pair, b, torch.optim.Adam(pair.parameters()), AgentRNG([0, 1]))
    for p, q in zip(pair.parameters(), params):
        assert torch.equal(p, q)


def test_critic_pair_validation(tiny_q):
    with pytest.raises(ConfigurationError):
        _const_pair(zeta=-1.0)
    with pytest.raises(ConfigurationError):
        _const_pair(M=0)
    with pytest.raises(ConfigurationError):
        _const_pair(gamma=1.0)
    q = tiny_q()
    with pytest.raises(ContractError):
        CriticPair(q, q, tiny_q(hidden=3), q, lambda o, r: o)


def test_cql_loss_pinned_regression(tiny_q):
    pair = _net_pair(tiny_q)
    for q in pair.online:
        q.train()
    loss, _ = cql_loss(pair, _batch(), AgentRNG([5, 6]))
    assert loss.item() == pytest.approx(PINNED_CQL, rel=1e-10)


# pinned at the first double-precision run
PINNED_CQL = 23.808639878737242
