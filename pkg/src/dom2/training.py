"""DOM2 training loop, baselines, checkpoints and the metrics stream.

Each training step, for every agent: draw a minibatch from the augmented
dataset, take one critic step, one actor step, then Polyak-average all
target networks. Agents are computed together along the leading agent axis
but share no parameters, optimiser statistics or random streams.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .approximators import DeterministicActor, QNetwork, ScoreNetwork, soft_update
from .critic import CriticPair, critic_update
from .datasets import Dataset, TransitionTable, augment, auto_thresholds, read_dataset
from .diffusion_policy import Q_NORM_MODES, bc_loss, q_loss, sample_action
from .envs import base_env_id, make_env
from .evaluation import rollout
from .exceptions import CheckpointError, ConfigurationError, ContractError, DivergenceError, SchemaError
from .rng import AgentRNG, derive_seed
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Trainer",
    "Checkpoint",
    "LearnedPolicy",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "ALGOS",
    "CONFIG_SCHEMA_VERSION",
    "CHECKPOINT_VERSION",
]

ALGOS = ("dom2", "ma_cql", "diff_bc")
CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
_MAGIC = b"DOM2CKPT\n"
_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class TrainConfig:
    algo: str = "dom2"
    gamma: float = 0.95
    rho: float = 0.005
    zeta: float = 5.0
    eta: float = 1.0
    N: int = 5
    beta_min: float = 0.1
    beta_max: float = 20.0
    batch_size: int = 256
    total_steps: int = 50_000
    lr_actor: float = 5e-3
    lr_critic: float = 3e-4
    M: int = 10
    q_norm_mode: str = "abs"
    guidance: str = "q1"
    subtract_log_m: bool = False
    seed: int = 0
    thresholds: Any = field(default_factory=list)
    return_kind: str = "joint"
    hidden: int = 256
    n_blocks: int = 3
    emb_dim: int = 32
    dropout: float = 0.1
    critic_hidden: int = 256
    actor_hidden: int = 256
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    shared_agent_seeds: bool = False
    log_every: int = 100
    eval_every: int = 1000
    eval_episodes: int = 20
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algo not in ALGOS:
            raise ConfigurationError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        for name in ("rho", "lr_actor", "lr_critic"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("N", "batch_size", "M", "hidden", "critic_hidden", "actor_hidden", "log_every", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.total_steps < 0 or self.eval_episodes < 0 or self.n_blocks < 0:
            raise ConfigurationError("total_steps, eval_episodes and n_blocks must be non-negative")
        if self.zeta < 0 or self.eta < 0:
            raise ConfigurationError("zeta and eta must be non-negative")
        if self.q_norm_mode not in Q_NORM_MODES:
            raise ConfigurationError(f"q_norm_mode must be one of {Q_NORM_MODES}")
        if self.guidance not in ("q1", "min"):
            raise ConfigurationError("guidance must be 'q1' or 'min'")
        if self.return_kind not in ("joint", "per-agent-mean"):
            raise ConfigurationError("return_kind must be 'joint' or 'per-agent-mean'")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        if not (self.thresholds == "auto" or isinstance(self.thresholds, (list, tuple))):
            raise ConfigurationError("thresholds must be a list of numbers or 'auto'")
        if isinstance(self.thresholds, (list, tuple)):
            self.thresholds = [float(t) for t in self.thresholds]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Strict parse: unknown keys or a different schema version are errors."""
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise SchemaError(f"config schema_version {version} is not supported (expected {CONFIG_SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SchemaError(f"unknown config keys: {unknown}")
        return cls(**d)

    @property
    def effective_eta(self) -> float:
        return 0.0 if self.algo == "diff_bc" else self.eta

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def diffusion(self) -> bool:
        return self.algo in ("dom2", "diff_bc")


class Trainer:
    """Owns the networks, optimisers and random streams of one run."""

    def __init__(self, config: TrainConfig, n_agents: int, obs_dim: int, act_dim: int, env_id: str = ""):
        self.config = config
        self.n_agents, self.obs_dim, self.act_dim = n_agents, obs_dim, act_dim
        self.env_id = env_id
        self.schedule = build_schedule(config.N, config.beta_min, config.beta_max)
        init_rng = AgentRNG.from_seed(config.seed, n_agents, stream=0, shared=config.shared_agent_seeds)
        self.rng = AgentRNG.from_seed(config.seed, n_agents, stream=1, shared=config.shared_agent_seeds)
        c, dt = config, config.torch_dtype
        if c.diffusion:
            self.actor = ScoreNetwork(
                n_agents, obs_dim, act_dim, c.N, c.hidden, c.n_blocks, c.emb_dim, c.dropout, rng=init_rng, dtype=dt
            )
        else:
            self.actor = DeterministicActor(n_agents, obs_dim, act_dim, c.actor_hidden, rng=init_rng, dtype=dt)
        self.q1 = QNetwork(n_agents, obs_dim, act_dim, c.critic_hidden, rng=init_rng, dtype=dt)
        self.q2 = QNetwork(n_agents, obs_dim, act_dim, c.critic_hidden, rng=init_rng, dtype=dt)
        self.actor_target = copy.deepcopy(self.actor).eval()
        self.q1_target = copy.deepcopy(self.q1).eval()
        self.q2_target = copy.deepcopy(self.q2).eval()
        self.critics = CriticPair(
            self.q1, self.q2, self.q1_target, self.q2_target, self._target_action,
            zeta=c.zeta, M=c.M, gamma=c.gamma, subtract_log_m=c.subtract_log_m,
        )
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=c.lr_actor)
        self.critic_opt = torch.optim.Adam(self.critics.parameters(), lr=c.lr_critic)
        self.step = 0
        self.counters = {"critic": 0, "actor": 0, "target": 0}
        self.thresholds: list[float] = []

    # modules in a fixed order for checkpoints
    def modules(self) -> dict:
        return {
            "actor": self.actor,
            "actor_target": self.actor_target,
            "q1": self.q1,
            "q2": self.q2,
            "q1_target": self.q1_target,
            "q2_target": self.q2_target,
        }

    def _target_action(self, obs_next, rng):
        if self.config.diffusion:
            return sample_action(self.actor_target, obs_next, self.schedule, rng).action
        a = self.actor_target(obs_next)
        noise = (rng.normal(obs_next.shape[1], self.act_dim, dtype=a.dtype) * self.config.policy_noise)
        noise = noise.clamp(-self.config.noise_clip, self.config.noise_clip)
        return (a + noise).clamp(-1.0, 1.0)

    def _guidance(self):
        return self.q1 if self.config.guidance == "q1" else (self.q1, self.q2)

    def train_step(self, table: TransitionTable) -> dict:
        c, step = self.config, self.step
        batch = table.sample(self.rng, c.batch_size)

        diag = critic_update(self.critics, batch, self.critic_opt, self.rng)
        self.counters["critic"] += 1
        assert self.counters["critic"] == step + 1 and self.counters["actor"] == step

        self.actor.train()
        for q in (self.q1, self.q2):
            q.eval()
        if c.diffusion:
            bc = bc_loss(self.actor, batch["obs"], batch["actions"], self.schedule, self.rng, per_agent=True)
            ql = q_loss(
                self.actor, self._guidance(), batch["obs"], batch["actions"], self.schedule,
                c.effective_eta, self.rng, c.q_norm_mode, per_agent=True,
            )
        else:
            bc = torch.full((self.n_agents,), float("nan"), dtype=batch["obs"].dtype)
            ql = -self.q1(batch["obs"], self.actor(batch["obs"])).mean(dim=(1, 2))
        total = (ql if not c.diffusion else bc + ql).sum()
        if not torch.isfinite(total):
            raise DivergenceError(f"actor loss is not finite at step {step}: {total.item()}")
        self.actor_opt.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward(inputs=list(self.actor.parameters()))
        self.actor_opt.step()
        self.counters["actor"] += 1
        assert self.counters["actor"] == self.counters["critic"] == step + 1

        soft_update(self.actor_target, self.actor, c.rho)
        soft_update(self.q1_target, self.q1, c.rho)
        soft_update(self.q2_target, self.q2, c.rho)
        self.counters["target"] += 1
        assert self.counters["target"] == step + 1
        self.step += 1
        diag = {k: v.detach() for k, v in diag.items()}
        diag["bc_loss"] = bc.detach()
        diag["q_loss"] = ql.detach()
        return diag

    def policy(self) -> "LearnedPolicy":
        return LearnedPolicy(self.actor, self.schedule if self.config.diffusion else None)

    # checkpointing -------------------------------------------------------
    def to_checkpoint(self) -> "Checkpoint":
        tensors: dict[str, np.ndarray] = {}
        for name, module in self.modules().items():
            for k, v in module.state_dict().items():
                tensors[f"{name}.{k}"] = v.detach().cpu().numpy()
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for idx, st in sorted(opt.state_dict()["state"].items()):
                for k, v in sorted(st.items()):
                    tensors[f"{name}.{idx}.{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        for j, s in enumerate(self.rng.get_state()):
            tensors[f"rng.{j}"] = np.frombuffer(s, dtype=np.uint8)
        return Checkpoint(
            config=self.config.to_dict(),
            schedule=self.schedule.to_dict(),
            step=self.step,
            env_id=self.env_id,
            dims={"n_agents": self.n_agents, "obs_dim": self.obs_dim, "act_dim": self.act_dim},
            counters=dict(self.counters),
            thresholds=list(self.thresholds),
            tensors=tensors,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", obs_dim: int | None = None, act_dim: int | None = None) -> "Trainer":
        dims = ckpt.dims
        if obs_dim is not None and obs_dim != dims["obs_dim"]:
            raise ContractError(f"checkpoint was trained with obs_dim={dims['obs_dim']}, got {obs_dim}")
        if act_dim is not None and act_dim != dims["act_dim"]:
            raise ContractError(f"checkpoint was trained with act_dim={dims['act_dim']}, got {act_dim}")
        config = TrainConfig.from_dict(ckpt.config)
        trainer = cls(config, dims["n_agents"], dims["obs_dim"], dims["act_dim"], ckpt.env_id)
        trainer.load_tensors(ckpt.tensors)
        trainer.step = ckpt.step
        trainer.counters = dict(ckpt.counters)
        trainer.thresholds = list(ckpt.thresholds)
        return trainer

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, module in self.modules().items():
            own = module.state_dict()
            loaded = {}
            for k, v in own.items():
                key = f"{name}.{k}"
                if key not in tensors:
                    raise CheckpointError(f"checkpoint lacks tensor {key}")
                arr = tensors[key]
                if tuple(arr.shape) != tuple(v.shape):
                    raise ContractError(f"{key}: checkpoint shape {arr.shape} does not match {tuple(v.shape)}")
                loaded[k] = torch.from_numpy(np.array(arr)).to(v.dtype)
            module.load_state_dict(loaded)
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            sd = opt.state_dict()
            state = {}
            for idx in range(len(sd["param_groups"][0]["params"])):
                keys = [k for k in tensors if k.startswith(f"{name}.{idx}.")]
                if keys:
                    state[idx] = {k.rsplit(".", 1)[1]: torch.from_numpy(np.array(tensors[k])) for k in keys}
            sd["state"] = state
            opt.load_state_dict(sd)
        states = [tensors[f"rng.{j}"].tobytes() for j in range(self.n_agents)]
        self.rng.set_state(states)


class LearnedPolicy:
    """Joint policy ``policy(obs, rng) -> actions`` backed by a trained actor.

    Diffusion actors draw their terminal noise from ``rng``; ``greedy``
    switches dropout off (the default).
    """

    def __init__(self, actor, schedule: NoiseSchedule | None, greedy: bool = True):
        self.actor = actor
        self.schedule = schedule
        self.greedy = greedy
        self._dropout_rng = None

    @property
    def n_agents(self):
        return self.actor.n_agents

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", use_target: bool = False) -> "LearnedPolicy":
        trainer = Trainer.from_checkpoint(ckpt)
        return cls(trainer.actor_target if use_target else trainer.actor, trainer.schedule if trainer.config.diffusion else None)

    @torch.no_grad()
    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.actor.n_agents, self.actor.obs_dim):
            raise ContractError(
                f"observations must have shape {(self.actor.n_agents, self.actor.obs_dim)}, got {obs.shape}"
            )
        was_training = self.actor.training
        self.actor.train(not self.greedy)
        try:
            dt = next(self.actor.parameters()).dtype
            o = torch.tensor(obs, dtype=dt).unsqueeze(1)
            if self.schedule is None:
                a = self.actor(o)
            else:
                noise = torch.from_numpy(rng.standard_normal((self.actor.n_agents, 1, self.actor.act_dim))).to(dt)
                dropout_rng = None
                if not self.greedy:
                    dropout_rng = AgentRNG([int(s) for s in rng.integers(0, 2**62, size=self.actor.n_agents)])
                a = sample_action(self.actor, o, self.schedule, dropout_rng, terminal_noise=noise).action
        finally:
            self.actor.train(was_training)
        return a.squeeze(1).to(torch.float64).numpy().copy()


# checkpoint file ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    schedule: dict
    step: int
    env_id: str
    dims: dict
    counters: dict
    thresholds: list
    tensors: dict = field(repr=False)

    def parameters_equal(self, other: "Checkpoint", prefixes=("actor", "q1", "q2")) -> bool:
        keys = [k for k in self.tensors if k.split(".", 1)[0] in prefixes]
        return keys == [k for k in other.tensors if k.split(".", 1)[0] in prefixes] and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in keys
        )


def _encode(ckpt: Checkpoint) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "schedule": ckpt.schedule,
        "step": ckpt.step,
        "env_id": ckpt.env_id,
        "dims": ckpt.dims,
        "counters": ckpt.counters,
        "thresholds": ckpt.thresholds,
        "tensors": manifest,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)) + hb + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a versioned binary checkpoint (header + JSON + raw little-endian tensors)."""
    Path(path).write_bytes(_encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not a DOM2 checkpoint")
    pos = len(_MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is incompatible with this build (expects {CHECKPOINT_VERSION})")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    blob = data[pos + hlen :]
    tensors = {}
    for m in header["tensors"]:
        dt = np.dtype(m["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(m["shape"], dtype=np.int64)), offset=m["offset"])
        tensors[m["name"]] = arr.reshape(m["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(
        header["config"], header["schedule"], header["step"], header["env_id"], header["dims"],
        header["counters"], header["thresholds"], tensors,
    )


# training driver ------------------------------------------------------------

def _finite_or_none(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def _metric_records(step: int, diag: dict, n_agents: int) -> list[dict]:
    return [
        {
            "step": step,
            "agent": j,
            "bc_loss": _finite_or_none(diag["bc_loss"][j]),
            "q_loss": _finite_or_none(diag["q_loss"][j]),
            "critic_loss": _finite_or_none(diag["critic_loss"][j]),
            "mean_q_data": _finite_or_none(diag["mean_q_data"][j]),
            "mean_q_random": _finite_or_none(diag["mean_q_random"][j]),
            "eval_return_mean": None,
            "eval_return_std": None,
        }
        for j in range(n_agents)
    ]


def evaluate_during_training(trainer: Trainer, step: int) -> dict:
    c = trainer.config
    env = make_env(base_env_id(trainer.env_id))
    returns = rollout(trainer.policy(), env, c.eval_episodes, derive_seed(c.seed, 7, step), greedy=True)
    return {
        "step": step,
        "agent": None,
        "bc_loss": None,
        "q_loss": None,
        "critic_loss": None,
        "mean_q_data": None,
        "mean_q_random": None,
        "eval_return_mean": float(np.mean(returns)) if returns else None,
        "eval_return_std": float(np.std(returns)) if returns else None,
    }


def prepare_dataset(config: TrainConfig, dataset: Dataset) -> tuple[Dataset, list[float]]:
    """Augment once up front (no-op for an empty threshold set)."""
    if config.thresholds == "auto":
        thresholds = auto_thresholds(dataset, config.return_kind)
    else:
        thresholds = sorted(config.thresholds)
    if thresholds:
        dataset = augment(dataset, thresholds, config.return_kind)
    return dataset, thresholds


def train(
    config: TrainConfig,
    data,
    out_dir=None,
    resume_from=None,
    metrics_sink=None,
) -> tuple[Checkpoint, list[dict]]:
    """Run training and return the final checkpoint and the metrics records.

    ``data`` is a dataset path or a :class:`Dataset`. When ``out_dir`` is
    given, ``metrics.jsonl`` and ``checkpoint.ckpt`` are written there (a
    ``diverged.ckpt`` on a non-finite loss). ``resume_from`` continues a
    checkpoint whose config matches ``config`` except for ``total_steps``.
    """
    dataset = data if isinstance(data, Dataset) else read_dataset(data)
    out = Path(out_dir) if out_dir is not None else None
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        saved = dict(ckpt.config)
        wanted = config.to_dict()
        saved.pop("total_steps"), wanted.pop("total_steps")
        if saved != wanted:
            diff = sorted(k for k in wanted if saved.get(k) != wanted[k])
            raise ConfigurationError(f"resume config differs from the checkpoint in {diff}")
        if ckpt.env_id != dataset.env_id:
            raise ConfigurationError("dataset environment differs from the checkpoint's")
        trainer = Trainer.from_checkpoint(ckpt, dataset.obs_dim, dataset.act_dim)
        trainer.config = config
        _, thresholds = prepare_dataset(config, dataset)
        aug = augment(dataset, trainer.thresholds, config.return_kind) if trainer.thresholds else dataset
    else:
        trainer = Trainer(config, dataset.n_agents, dataset.obs_dim, dataset.act_dim, dataset.env_id)
        aug, thresholds = prepare_dataset(config, dataset)
        trainer.thresholds = thresholds
    table = TransitionTable(aug, dtype=config.torch_dtype)

    metrics: list[dict] = []
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.jsonl", "a" if resume_from is not None else "w", encoding="utf-8")

    def emit(records):
        for rec in records:
            metrics.append(rec)
            line = json.dumps(rec, sort_keys=True)
            if fh is not None:
                fh.write(line + "\n")
            if metrics_sink is not None:
                metrics_sink(rec)

    try:
        while trainer.step < config.total_steps:
            try:
                diag = trainer.train_step(table)
            except DivergenceError:
                if out is not None:
                    save_checkpoint(trainer.to_checkpoint(), out / "diverged.ckpt")
                raise
            step = trainer.step
            if step % config.log_every == 0:
                emit(_metric_records(step, diag, trainer.n_agents))
            if step % config.eval_every == 0 and config.eval_episodes > 0:
                rec = evaluate_during_training(trainer, step)
                emit([rec])
                log.info("step %d eval return %.2f +- %.2f", step, rec["eval_return_mean"], rec["eval_return_std"])
    finally:
        if fh is not None:
            fh.close()
    ckpt = trainer.to_checkpoint()
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint.ckpt")
    return ckpt, metrics
