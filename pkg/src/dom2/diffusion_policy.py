"""Diffusion policy: score-matching loss, DPM-solver-1 sampling, Q-guided loss.

Tensors follow the approximators' convention ``(n_agents, batch, dim)``.
Losses return the sum of per-agent losses (pass ``per_agent=True`` for the
vector); because agents share no parameters, the summed loss has exactly
each agent's own gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .approximators import QNetwork, ScoreNetwork
from .exceptions import ConfigurationError, ContractError, NumericalGuardError
from .rng import AgentRNG
from .schedule import NoiseSchedule, drift_diffusion

__all__ = [
    "PolicySample",
    "bc_loss",
    "sample_action",
    "ode_oracle_sample",
    "q_loss",
    "policy_loss",
    "Q_NORM_MODES",
]

Q_NORM_MODES = ("abs", "paper")


def _lift(net, *tensors):
    squeeze = tensors[0].dim() == 2
    if squeeze:
        if net.n_agents != 1:
            raise ContractError("2-D inputs need a single-agent network")
        tensors = tuple(t.unsqueeze(0) for t in tensors)
    return squeeze, tensors


def _reduce(per_agent, per_agent_flag):
    return per_agent if per_agent_flag else per_agent.sum()


@dataclass
class PolicySample:
    action: torch.Tensor
    terminal_noise: torch.Tensor
    intermediates: list[torch.Tensor] | None = None


def bc_loss(
    net: ScoreNetwork,
    obs: torch.Tensor,
    actions: torch.Tensor,
    schedule: NoiseSchedule,
    rng: AgentRNG,
    per_agent: bool = False,
) -> torch.Tensor:
    """Denoising score-matching loss ``E || eps - eps_theta(alpha_i a + sigma_i eps, o, i) ||^2``.

    The step index is drawn uniformly from ``{0, ..., N}`` (both ends included).
    """
    _, (obs, actions) = _lift(net, obs, actions)
    n_agents, batch = actions.shape[:2]
    if batch == 0:
        raise ContractError("bc_loss needs a non-empty batch")
    eps = rng.normal(batch, actions.shape[-1], dtype=actions.dtype)
    idx = rng.integers(schedule.N + 1, batch)
    alpha = torch.tensor(schedule.alpha, dtype=actions.dtype)[idx].unsqueeze(-1)
    sigma = torch.tensor(schedule.sigma, dtype=actions.dtype)[idx].unsqueeze(-1)
    pred = net(alpha * actions + sigma * eps, obs, idx, rng=rng)
    loss = ((eps - pred) ** 2).sum(-1).mean(-1)
    return _reduce(loss, per_agent)


def _solver_coefficients(schedule: NoiseSchedule):
    """(scale, noise weight) per step i = N..1 for the first-order update."""
    a, s, lam = schedule.alpha, schedule.sigma, schedule.lam
    coeffs = []
    for i in range(schedule.N, 0, -1):
        scale = float(np.exp(np.log(a[i - 1]) - np.log(a[i])))
        weight = float(s[i - 1] * np.expm1(lam[i - 1] - lam[i]))
        coeffs.append((i, scale, weight))
    return coeffs


def sample_action(
    net: ScoreNetwork,
    obs: torch.Tensor,
    schedule: NoiseSchedule,
    rng: AgentRNG | None = None,
    terminal_noise: torch.Tensor | None = None,
    clip: bool = True,
    keep_intermediates: bool = False,
) -> PolicySample:
    """Denoise Gaussian noise into an action with the first-order DPM-solver.

    For ``i = N, ..., 1``::

        a_{i-1} = (alpha_{i-1} / alpha_i) a_i
                  - sigma_{i-1} (exp(lambda_{i-1} - lambda_i) - 1) eps_theta(a_i, o, i)

    and the result ``a_0`` is clamped to ``[-1, 1]``. Gradients flow through
    every step when the caller has autograd enabled.
    """
    squeeze, (obs,) = _lift(net, obs)
    batch = obs.shape[1]
    if terminal_noise is None:
        if rng is None:
            raise ContractError("sample_action needs either rng or terminal_noise")
        terminal_noise = rng.normal(batch, net.act_dim, dtype=obs.dtype)
    elif squeeze:
        terminal_noise = terminal_noise.unsqueeze(0)
    a = terminal_noise
    trace = [a] if keep_intermediates else None
    for i, scale, weight in _solver_coefficients(schedule):
        eps = net(a, obs, i, rng=rng)
        a = scale * a - weight * eps
        if trace is not None:
            trace.append(a)
    if clip:
        a = a.clamp(-1.0, 1.0)
    if squeeze:
        a, terminal_noise = a.squeeze(0), terminal_noise.squeeze(0)
        trace = [t.squeeze(0) for t in trace] if trace is not None else None
    return PolicySample(a, terminal_noise, trace)


@torch.no_grad()
def ode_oracle_sample(
    net: ScoreNetwork,
    obs: torch.Tensor,
    schedule: NoiseSchedule,
    terminal_noise: torch.Tensor,
    euler_steps: int = 5000,
) -> torch.Tensor:
    """Fixed-step Euler integration of the diffusion ODE from tau=1 down to 0.

    ``da/dtau = f(tau) a + g^2(tau) / (2 sigma(tau)) eps_theta(a, o, tau)``; the
    network is conditioned on the grid index nearest to ``tau``. No clamp.
    Used as an independent reference for :func:`sample_action`.
    """
    if euler_steps < 1:
        raise ContractError("euler_steps must be positive")
    a = terminal_noise.clone()
    dt = 1.0 / euler_steps
    for k in range(euler_steps):
        tau = 1.0 - k * dt
        f, g2 = drift_diffusion(schedule, tau)
        sigma = float(schedule.sigma_at(tau))
        eps = net(a, obs, schedule.nearest_index(tau))
        a = a - dt * (f * a + g2 / (2.0 * sigma) * eps)
    return a


def _critic_value(critic, obs, actions):
    if isinstance(critic, QNetwork):
        return critic(obs, actions)
    values = [c(obs, actions) for c in critic]
    return torch.stack(values).min(dim=0).values


def q_loss(
    net: ScoreNetwork,
    critic: QNetwork | Sequence[QNetwork],
    obs: torch.Tensor,
    data_actions: torch.Tensor,
    schedule: NoiseSchedule,
    eta: float,
    rng: AgentRNG,
    q_norm_mode: str = "abs",
    per_agent: bool = False,
) -> torch.Tensor:
    """Normalised Q-loss ``-(eta / D) E[Q(o, a_0)]`` with ``a_0`` from :func:`sample_action`.

    ``D`` is the batch mean of ``Q(o, a_data)`` (``"paper"``) or of its
    absolute value floored at 1e-6 (``"abs"``); it carries no gradient.
    ``critic`` may be a sequence of networks, in which case their minimum
    guides the policy. With ``eta == 0`` nothing is sampled and the loss is 0.
    """
    if q_norm_mode not in Q_NORM_MODES:
        raise ConfigurationError(f"q_norm_mode must be one of {Q_NORM_MODES}, got {q_norm_mode!r}")
    _, (obs, data_actions) = _lift(net, obs, data_actions)
    if obs.shape[1] == 0:
        raise ContractError("q_loss needs a non-empty batch")
    if eta == 0:
        zero = obs.new_zeros(obs.shape[0])
        return _reduce(zero, per_agent)
    with torch.no_grad():
        q_data = _critic_value(critic, obs, data_actions).squeeze(-1)
        if q_norm_mode == "paper":
            denom = q_data.mean(dim=1)
            if bool((denom.abs() < 1e-8).any()):
                raise NumericalGuardError(f"mean Q on data is ~0 ({denom.tolist()}); cannot normalise")
        else:
            denom = q_data.abs().mean(dim=1).clamp_min(1e-6)
    action = sample_action(net, obs, schedule, rng).action
    q_pi = _critic_value(critic, obs, action).squeeze(-1)
    loss = -eta * q_pi.mean(dim=1) / denom
    return _reduce(loss, per_agent)


def policy_loss(net, critic, obs, actions, schedule, eta, rng, q_norm_mode="abs", per_agent=False):
    """Behaviour-cloning loss plus Q-loss on the same batch."""
    bc = bc_loss(net, obs, actions, schedule, rng, per_agent=per_agent)
    return bc + q_loss(net, critic, obs, actions, schedule, eta, rng, q_norm_mode, per_agent=per_agent)
