"""Twin conservative critics: double-Q TD targets plus a logsumexp penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .approximators import QNetwork
from .exceptions import ConfigurationError, ContractError, DivergenceError
from .rng import AgentRNG

__all__ = ["CriticPair", "td_target", "cql_loss", "critic_update", "logsumexp"]

TargetPolicy = Callable[[torch.Tensor, AgentRNG], torch.Tensor]


def logsumexp(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``log sum exp`` along ``dim``, shifted by the max for overflow safety."""
    m = x.max(dim=dim, keepdim=True).values.detach()
    return (m + torch.log(torch.exp(x - m).sum(dim=dim, keepdim=True))).squeeze(dim)


@dataclass
class CriticPair:
    """Online and target twin critics of every agent.

    ``target_policy(obs_next, rng)`` returns the target policy's action; it
    is called without gradient tracking.
    """

    q1: QNetwork
    q2: QNetwork
    q1_target: QNetwork
    q2_target: QNetwork
    target_policy: TargetPolicy
    zeta: float = 5.0
    M: int = 10
    gamma: float = 0.95
    subtract_log_m: bool = False
    _n_updates: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.zeta < 0:
            raise ConfigurationError(f"zeta must be >= 0, got {self.zeta}")
        if self.M < 1:
            raise ConfigurationError(f"M must be >= 1, got {self.M}")
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            shapes = [p.shape for p in online.parameters()]
            if shapes != [p.shape for p in target.parameters()]:
                raise ContractError("online and target critics have different shapes")

    @property
    def online(self):
        return (self.q1, self.q2)

    @property
    def targets(self):
        return (self.q1_target, self.q2_target)

    def parameters(self):
        return [p for q in self.online for p in q.parameters()]


def _column(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=like.dtype)
    if x.dim() == like.dim() - 1:
        x = x.unsqueeze(-1)
    return x


@torch.no_grad()
def td_target(pair: CriticPair, r, o_next, done, rng: AgentRNG) -> torch.Tensor:
    """``y = r + (1 - done) * gamma * min_k Qbar_k(o', pibar(o'))`` without gradient."""
    if any(q.training for q in pair.targets):
        raise ContractError("target critics must be in evaluation mode")
    r = _column(r, o_next)
    done = _column(done, o_next)
    a_next = pair.target_policy(o_next, rng)
    q_next = torch.min(pair.q1_target(o_next, a_next), pair.q2_target(o_next, a_next))
    return r + (1.0 - done) * pair.gamma * q_next


def cql_loss(pair: CriticPair, batch: dict, rng: AgentRNG, per_agent: bool = False):
    """Conservative TD loss averaged over both critics.

    ``batch`` holds ``obs, actions, rewards, next_obs, dones`` with shapes
    ``(n_agents, S, .)``. Returns ``(loss, diagnostics)`` where diagnostics are
    per-agent tensors (detached).
    """
    obs, actions = batch["obs"], batch["actions"]
    if obs.dim() != 3 or obs.shape[1] == 0:
        raise ContractError("cql_loss needs a non-empty batch of shape (n_agents, S, obs_dim)")
    S, act_dim = obs.shape[1], actions.shape[-1]
    y = td_target(pair, batch["rewards"], batch["next_obs"], batch["dones"], rng)

    use_penalty = pair.zeta != 0
    if use_penalty:
        rand = rng.uniform(S * pair.M, act_dim, low=-1.0, high=1.0, dtype=actions.dtype)
        obs_in = torch.cat([obs, obs.repeat_interleave(pair.M, dim=1)], dim=1)
        act_in = torch.cat([actions, rand], dim=1)
    else:
        obs_in, act_in = obs, actions

    td_terms, penalties, q_data_means, q_rand_means = [], [], [], []
    for q in pair.online:
        out = q(obs_in, act_in, n_stat_rows=S)
        q_data = out[:, :S]
        td_terms.append(((q_data - y) ** 2).mean(dim=(1, 2)))
        q_data_means.append(q_data.detach().mean(dim=(1, 2)))
        if use_penalty:
            q_rand = out[:, S:].reshape(obs.shape[0], S, pair.M)
            lse = logsumexp(q_rand, dim=-1)
            if pair.subtract_log_m:
                lse = lse - math.log(pair.M)
            penalties.append((lse - q_data.squeeze(-1)).mean(dim=1))
            q_rand_means.append(q_rand.detach().mean(dim=(1, 2)))

    td = torch.stack(td_terms).mean(dim=0)
    loss = td
    if use_penalty:
        penalty = torch.stack(penalties).mean(dim=0)
        loss = td + pair.zeta * penalty
    diagnostics = {
        "critic_loss": loss.detach(),
        "td_loss": td.detach(),
        "mean_q_data": torch.stack(q_data_means).mean(dim=0),
        "mean_q_random": torch.stack(q_rand_means).mean(dim=0) if use_penalty else torch.full_like(td, float("nan")),
        "penalty": penalty.detach() if use_penalty else torch.zeros_like(td),
    }
    return (loss if per_agent else loss.sum()), diagnostics


def critic_update(pair: CriticPair, batch: dict, optimizer: torch.optim.Optimizer, rng: AgentRNG) -> dict:
    """One gradient step of both online critics on :func:`cql_loss`.

    Raises:
        DivergenceError: if the loss is not finite; parameters are left untouched.
    """
    for q in pair.online:
        q.train()
    loss, diagnostics = cql_loss(pair, batch, rng)
    if not torch.isfinite(loss):
        raise DivergenceError(f"critic loss is not finite: {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward(inputs=pair.parameters())
    optimizer.step()
    pair._n_updates += 1
    return diagnostics
