"""Function approximators with a leading agent axis.

All networks hold an independent parameter set per agent, stored as
stacked tensors of shape ``(n_agents, ...)`` and applied with batched
matrix products. Inputs are ``(n_agents, batch, features)``; a 2-D input
is accepted when ``n_agents == 1``. Since parameters never interact across
the agent axis, summing per-agent losses and taking one optimiser step is
identical to training every agent on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ContractError
from .rng import AgentRNG

__all__ = [
    "AgentLinear",
    "AgentBatchNorm",
    "ScoreNetwork",
    "QNetwork",
    "DeterministicActor",
    "soft_update",
    "grad_check",
    "GradCheckReport",
    "flatten_state",
    "load_flat_state",
]


def _init_rng(rng: AgentRNG | None, n_agents: int) -> AgentRNG:
    if rng is None:
        rng = AgentRNG([int(torch.randint(2**62, ())) for _ in range(n_agents)])
    if rng.n_agents != n_agents:
        raise ContractError(f"rng has {rng.n_agents} streams but the network has {n_agents} agents")
    return rng


class AgentLinear(nn.Module):
    """Per-agent affine map ``y = x W_j + b_j`` with fan-in uniform init."""

    def __init__(self, n_agents, in_features, out_features, rng=None, init_scale=1.0, dtype=torch.float64):
        super().__init__()
        rng = _init_rng(rng, n_agents)
        bound = init_scale / math.sqrt(in_features)
        self.weight = nn.Parameter(rng.uniform(in_features, out_features, low=-bound, high=bound, dtype=dtype))
        self.bias = nn.Parameter(rng.uniform(1, out_features, low=-bound, high=bound, dtype=dtype))

    @property
    def in_features(self):
        return self.weight.shape[1]

    def forward(self, x):
        return torch.baddbmm(self.bias, x, self.weight)


class AgentBatchNorm(nn.Module):
    """Batch normalisation over the batch axis, separately for each agent.

    ``n_stat_rows`` restricts the batch statistics to the leading rows, so
    extra rows (e.g. random actions for a conservative penalty) are
    normalised with the statistics of the data rows.
    """

    def __init__(self, n_agents, num_features, momentum=0.1, eps=1e-5, dtype=torch.float64):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(n_agents, 1, num_features, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(n_agents, 1, num_features, dtype=dtype))
        self.register_buffer("running_mean", torch.zeros(n_agents, 1, num_features, dtype=dtype))
        self.register_buffer("running_var", torch.ones(n_agents, 1, num_features, dtype=dtype))

    def forward(self, x, n_stat_rows=None):
        if self.training:
            ref = x if n_stat_rows is None else x[:, :n_stat_rows]
            mean = ref.mean(dim=1, keepdim=True)
            var = ref.var(dim=1, unbiased=False, keepdim=True)
            n = ref.shape[1]
            with torch.no_grad():
                self.running_mean.lerp_(mean.detach(), self.momentum)
                unbiased = var.detach() * (n / (n - 1)) if n > 1 else var.detach()
                self.running_var.lerp_(unbiased, self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) * torch.rsqrt(var + self.eps) * self.weight + self.bias


def _as_3d(n_agents, *tensors):
    squeeze = tensors[0].dim() == 2
    if squeeze and n_agents != 1:
        raise ContractError(f"2-D input is only accepted for a single agent, network has {n_agents}")
    out = tuple(t.unsqueeze(0) if t.dim() == 2 else t for t in tensors)
    for t in out:
        if t.dim() != 3 or t.shape[0] != n_agents:
            raise ContractError(f"expected input of shape ({n_agents}, batch, features), got {tuple(t.shape)}")
    return squeeze, out


def _check_width(x, expected, what):
    if x.shape[-1] != expected:
        raise ContractError(f"{what} has dimension {x.shape[-1]}, expected {expected}")


def _dropout(x, p, training, rng):
    if not training or p == 0.0:
        return x
    if rng is None:
        keep = torch.rand(x.shape, dtype=x.dtype) >= p
    else:
        keep = rng.uniform(*x.shape[1:], dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class ScoreNetwork(nn.Module):
    """Noise predictor ``eps(a_noisy, o, i)`` built from residual blocks.

    The diffusion step index is encoded by a 32-dimensional sinusoidal
    embedding of its diffusion time ``i / N`` and injected at the input and
    in every block. Each block output passes through dropout; the final
    layer is squashed with tanh.
    """

    def __init__(
        self,
        n_agents: int,
        obs_dim: int,
        act_dim: int,
        n_steps: int,
        hidden: int = 256,
        n_blocks: int = 3,
        emb_dim: int = 32,
        dropout: float = 0.1,
        final_init_scale: float = 1e-3,
        rng: AgentRNG | None = None,
        dtype=torch.float64,
    ):
        super().__init__()
        if emb_dim % 2:
            raise ContractError("emb_dim must be even")
        rng = _init_rng(rng, n_agents)
        self.n_agents, self.obs_dim, self.act_dim, self.n_steps = n_agents, obs_dim, act_dim, n_steps
        self.dropout = dropout
        half = emb_dim // 2
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(32.0), half, dtype=dtype)))
        self.inp = AgentLinear(n_agents, emb_dim + obs_dim + act_dim, hidden, rng, dtype=dtype)
        self.blocks = nn.ModuleList()
        for _ in range(n_blocks):
            self.blocks.append(
                nn.ModuleDict(
                    {
                        "fc1": AgentLinear(n_agents, hidden, hidden, rng, dtype=dtype),
                        "time": AgentLinear(n_agents, emb_dim, hidden, rng, dtype=dtype),
                        "fc2": AgentLinear(n_agents, hidden, hidden, rng, dtype=dtype),
                    }
                )
            )
        self.out = AgentLinear(n_agents, hidden, act_dim, rng, init_scale=final_init_scale, dtype=dtype)

    def embed(self, step_index, shape):
        idx = torch.as_tensor(step_index)
        if idx.dim() == 0:
            idx = idx.expand(shape)
        if idx.shape != shape:
            raise ContractError(f"step_index shape {tuple(idx.shape)} does not match batch {tuple(shape)}")
        if bool(((idx < 0) | (idx > self.n_steps)).any()):
            raise ContractError(f"step_index must lie in [0, {self.n_steps}]")
        t = idx.to(self.freqs.dtype).unsqueeze(-1) / self.n_steps
        arg = t * self.freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)

    def forward(self, a_noisy, obs, step_index, rng: AgentRNG | None = None):
        squeeze, (a_noisy, obs) = _as_3d(self.n_agents, a_noisy, obs)
        _check_width(a_noisy, self.act_dim, "action")
        _check_width(obs, self.obs_dim, "observation")
        if a_noisy.shape[1] != obs.shape[1]:
            raise ContractError("action and observation batches differ in size")
        emb = self.embed(step_index, a_noisy.shape[:2])
        h = F.mish(self.inp(torch.cat([emb, obs, a_noisy], dim=-1)))
        for block in self.blocks:
            z = block["fc1"](F.mish(h)) + block["time"](emb)
            h = _dropout(h + block["fc2"](F.mish(z)), self.dropout, self.training, rng)
        out = torch.tanh(self.out(F.mish(h)))
        return out.squeeze(0) if squeeze else out


class QNetwork(nn.Module):
    """Batch norm on the concatenated (o, a) input, two Mish layers, linear head."""

    def __init__(self, n_agents, obs_dim, act_dim, hidden=256, final_init_scale=1e-3, rng=None, dtype=torch.float64):
        super().__init__()
        rng = _init_rng(rng, n_agents)
        self.n_agents, self.obs_dim, self.act_dim = n_agents, obs_dim, act_dim
        self.norm = AgentBatchNorm(n_agents, obs_dim + act_dim, dtype=dtype)
        self.fc1 = AgentLinear(n_agents, obs_dim + act_dim, hidden, rng, dtype=dtype)
        self.fc2 = AgentLinear(n_agents, hidden, hidden, rng, dtype=dtype)
        self.out = AgentLinear(n_agents, hidden, 1, rng, init_scale=final_init_scale, dtype=dtype)

    def forward(self, obs, act, n_stat_rows=None):
        squeeze, (obs, act) = _as_3d(self.n_agents, obs, act)
        _check_width(obs, self.obs_dim, "observation")
        _check_width(act, self.act_dim, "action")
        x = self.norm(torch.cat([obs, act], dim=-1), n_stat_rows)
        x = F.mish(self.fc1(x))
        x = F.mish(self.fc2(x))
        q = self.out(x)
        return q.squeeze(0) if squeeze else q


class DeterministicActor(nn.Module):
    """TD3-style actor for the conservative baseline; output in [-1, 1]."""

    def __init__(self, n_agents, obs_dim, act_dim, hidden=256, rng=None, dtype=torch.float64):
        super().__init__()
        rng = _init_rng(rng, n_agents)
        self.n_agents, self.obs_dim, self.act_dim = n_agents, obs_dim, act_dim
        self.norm = AgentBatchNorm(n_agents, obs_dim, dtype=dtype)
        self.fc1 = AgentLinear(n_agents, obs_dim, hidden, rng, dtype=dtype)
        self.fc2 = AgentLinear(n_agents, hidden, hidden, rng, dtype=dtype)
        self.out = AgentLinear(n_agents, hidden, act_dim, rng, dtype=dtype)

    def forward(self, obs):
        squeeze, (obs,) = _as_3d(self.n_agents, obs)
        _check_width(obs, self.obs_dim, "observation")
        x = F.mish(self.fc1(self.norm(obs)))
        x = F.mish(self.fc2(x))
        a = torch.tanh(self.out(x))
        return a.squeeze(0) if squeeze else a


def _state_tensors(obj) -> list[tuple[str, torch.Tensor]]:
    if isinstance(obj, nn.Module):
        return [(k, v) for k, v in obj.state_dict(keep_vars=True).items() if v.is_floating_point()]
    return [(str(i), t) for i, t in enumerate(obj)]


@torch.no_grad()
def soft_update(target, online, rho: float):
    """Polyak average ``target <- rho * online + (1 - rho) * target`` in place.

    Works on modules (parameters and floating-point buffers) or on
    sequences of tensors. ``online`` is never modified.
    """
    if not (0.0 < rho <= 1.0):
        raise ContractError(f"rho must lie in (0, 1], got {rho}")
    t_items, o_items = _state_tensors(target), _state_tensors(online)
    if len(t_items) != len(o_items):
        raise ContractError("target and online parameter sets differ in length")
    for (tk, t), (ok, o) in zip(t_items, o_items):
        if tk != ok or t.shape != o.shape:
            raise ContractError(f"parameter mismatch: {tk}{tuple(t.shape)} vs {ok}{tuple(o.shape)}")
    for (_, t), (_, o) in zip(t_items, o_items):
        if rho == 1.0:
            t.copy_(o)
        else:
            t.mul_(1.0 - rho).add_(o, alpha=rho)
    return target


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    net: nn.Module,
    loss_probe: Callable[[nn.Module], torch.Tensor],
    tolerance: float = 1e-4,
    n_params: int = 50,
    eps: float = 1e-5,
    seed: int = 0,
    abs_floor: float = 1e-8,
    params: Iterable[tuple[str, torch.Tensor]] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_probe(net)`` with central differences.

    ``loss_probe`` must be deterministic (re-seed any randomness inside it).
    Up to ``n_params`` scalar entries are picked uniformly at random across
    all trainable parameters. Relative error is
    ``|g - g_fd| / max(|g|, |g_fd|, abs_floor)``.
    """
    named = list(params) if params is not None else [(k, p) for k, p in net.named_parameters() if p.requires_grad]
    for name, p in named:
        if p.dtype != torch.float64:
            raise ContractError(f"grad_check needs float64 parameters, {name} is {p.dtype}")
    for _, p in named:
        p.grad = None
    loss = loss_probe(net)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for (_, p), g in zip(named, grads)]

    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, max_err = "", 0.0
    with torch.no_grad():
        for flat in np.sort(picks):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = named[k]
            idx = np.unravel_index(int(flat - offsets[k]), tuple(p.shape))
            orig = p[idx].item()
            p[idx] = orig + eps
            lp = loss_probe(net).item()
            p[idx] = orig - eps
            lm = loss_probe(net).item()
            p[idx] = orig
            num = (lp - lm) / (2 * eps)
            ana = grads[k][idx].item()
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            if err > max_err:
                max_err, worst = err, f"{name}{list(idx)}: autograd={ana:.6e} fd={num:.6e}"
    return GradCheckReport(max_err, len(picks), tolerance, worst)


def flatten_state(module: nn.Module) -> tuple[np.ndarray, list[dict]]:
    """Concatenate parameters and float buffers into one float64 vector plus a manifest."""
    manifest, chunks = [], []
    for name, t in _state_tensors(module):
        arr = t.detach().cpu().numpy().astype(np.float64, copy=False).ravel()
        manifest.append({"name": name, "shape": list(t.shape)})
        chunks.append(arr)
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return flat, manifest


@torch.no_grad()
def load_flat_state(module: nn.Module, flat: np.ndarray, manifest: list[dict]) -> None:
    items = _state_tensors(module)
    if [n for n, _ in items] != [m["name"] for m in manifest]:
        raise ContractError("parameter manifest names do not match the network")
    pos = 0
    for (name, t), m in zip(items, manifest):
        if list(t.shape) != list(m["shape"]):
            raise ContractError(f"{name}: stored shape {m['shape']} but network expects {list(t.shape)}")
        n = t.numel()
        t.copy_(torch.from_numpy(np.asarray(flat[pos : pos + n]).reshape(t.shape)).to(t.dtype))
        pos += n
    if pos != len(flat):
        raise ContractError("flat parameter vector is longer than the manifest")
