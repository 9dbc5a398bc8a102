"""Trajectory datasets: generation, JSON-lines storage, augmentation, minibatches.

File format (UTF-8 JSON Lines, optionally gzip-compressed): the first line
is ``{"manifest": {...}}``; every following line is one trajectory with the
keys ``env_id, seed, obs, actions, rewards, dones, returns``. Arrays are
step-major and agent-minor. ``obs`` holds ``T + 1`` entries, the last being
the observation after the final step; ``returns`` holds per-agent sums of
``rewards``.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .envs import SENTINEL_OFFSET, make_env, parse_env_id, scripted_policy
from .exceptions import ConfigurationError, ContractError, SchemaError
from .rng import AgentRNG

__all__ = [
    "Trajectory",
    "Dataset",
    "TransitionTable",
    "QUALITIES",
    "OBS_ENCODING",
    "generate_dataset",
    "augment",
    "parse_thresholds",
    "auto_thresholds",
    "trajectory_return",
    "sample_minibatch",
    "read_dataset",
    "write_dataset",
]

QUALITIES = ("medium-replay", "medium", "medium-expert", "expert")
RETURN_KINDS = ("joint", "per-agent-mean")
OBS_ENCODING = {"version": 1, "inactive_landmark_sentinel": list(SENTINEL_OFFSET)}
TRAJECTORY_KEYS = ("env_id", "seed", "obs", "actions", "rewards", "dones", "returns")


@dataclass(frozen=True, eq=False)
class Trajectory:
    env_id: str
    seed: int
    obs: np.ndarray  # (T + 1, n_agents, obs_dim)
    actions: np.ndarray  # (T, n_agents, act_dim)
    rewards: np.ndarray  # (T, n_agents)
    dones: np.ndarray  # (T, n_agents)

    def __post_init__(self):
        T = len(self.actions)
        if self.obs.shape[0] != T + 1 or self.rewards.shape[0] != T or self.dones.shape[0] != T:
            raise SchemaError("trajectory arrays disagree in length")
        n = self.actions.shape[1]
        if self.obs.shape[1] != n or self.rewards.shape[1] != n or self.dones.shape[1] != n:
            raise SchemaError("trajectory arrays disagree in agent count")
        for arr in (self.obs, self.actions, self.rewards, self.dones):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.actions)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)

    @property
    def joint_return(self) -> float:
        return float(self.rewards.sum())

    def to_record(self) -> dict:
        return {
            "env_id": self.env_id,
            "seed": int(self.seed),
            "obs": self.obs.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "dones": self.dones.astype(bool).tolist(),
            "returns": self.returns.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        if set(rec) != set(TRAJECTORY_KEYS):
            raise SchemaError(f"trajectory keys must be exactly {TRAJECTORY_KEYS}, got {sorted(rec)}")
        try:
            traj = cls(
                str(rec["env_id"]),
                int(rec["seed"]),
                np.asarray(rec["obs"], dtype=np.float64),
                np.asarray(rec["actions"], dtype=np.float64),
                np.asarray(rec["rewards"], dtype=np.float64),
                np.asarray(rec["dones"], dtype=bool),
            )
        except (TypeError, ValueError, IndexError) as exc:
            raise SchemaError(f"malformed trajectory record: {exc}") from None
        stored = np.asarray(rec["returns"], dtype=np.float64)
        if stored.shape != traj.returns.shape or np.max(np.abs(stored - traj.returns), initial=0.0) > 1e-9:
            raise SchemaError("stored returns do not match the sum of rewards")
        return traj


def trajectory_return(traj: Trajectory, return_kind: str = "joint") -> float:
    if return_kind == "joint":
        return traj.joint_return
    if return_kind == "per-agent-mean":
        return float(traj.returns.mean())
    raise ConfigurationError(f"return_kind must be one of {RETURN_KINDS}, got {return_kind!r}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered trajectories; ``order`` may reference the same trajectory repeatedly."""

    trajectories: tuple
    manifest: dict = field(default_factory=dict)
    order: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if self.order is None:
            object.__setattr__(self, "order", tuple(range(len(self.trajectories))))
        else:
            object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        env_ids = {t.env_id for t in self.trajectories}
        if len(env_ids) > 1:
            raise SchemaError(f"dataset mixes environments: {sorted(env_ids)}")
        if self.manifest.get("env_id") and env_ids and env_ids != {self.manifest["env_id"]}:
            raise SchemaError("manifest env_id disagrees with the trajectories")

    def __len__(self):
        return len(self.order)

    def __iter__(self):
        return (self.trajectories[i] for i in self.order)

    def __getitem__(self, k) -> Trajectory:
        return self.trajectories[self.order[k]]

    @property
    def env_id(self) -> str:
        if self.manifest.get("env_id"):
            return self.manifest["env_id"]
        return self.trajectories[0].env_id

    @property
    def n_agents(self) -> int:
        return self.trajectories[0].actions.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].obs.shape[2]

    @property
    def act_dim(self) -> int:
        return self.trajectories[0].actions.shape[2]

    def returns(self, return_kind: str = "joint") -> np.ndarray:
        return np.array([trajectory_return(t, return_kind) for t in self])

    def multiplicities(self) -> np.ndarray:
        return np.bincount(np.asarray(self.order, dtype=np.int64), minlength=len(self.trajectories))


# generation -----------------------------------------------------------------

def _episode_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def rollout_trajectory(env, policy, seed: int) -> Trajectory:
    rng = np.random.default_rng([seed, 1])
    obs = [env.reset(seed)]
    actions, rewards, dones = [], [], []
    while True:
        a = np.clip(np.asarray(policy(obs[-1], rng), dtype=np.float64), -1.0, 1.0)
        res = env.step(a)
        actions.append(a)
        rewards.append(res.rewards)
        dones.append(np.full(env.n_agents, res.done))
        obs.append(res.obs)
        if res.done:
            break
    return Trajectory(env.config.env_id, seed, np.stack(obs), np.stack(actions), np.stack(rewards), np.stack(dones))


def generate_dataset(env_id: str, quality: str, episodes: int, seed: int) -> Dataset:
    """Roll out scripted behaviour policies of the requested quality tier.

    ``expert`` and ``medium`` use the scripted expert without / with Gaussian
    action noise (std 0.5); ``medium-expert`` is the first half expert and the
    second half medium episodes; ``medium-replay`` anneals the noise std
    linearly from 1.5 to 0.5 over the episodes.
    """
    if quality not in QUALITIES:
        raise ConfigurationError(f"quality must be one of {QUALITIES}, got {quality!r}")
    if int(episodes) <= 0:
        raise ConfigurationError(f"episodes must be positive, got {episodes}")
    cfg = parse_env_id(env_id)
    env = make_env(cfg)
    trajectories = []
    n_expert = {"expert": episodes, "medium": 0, "medium-expert": episodes // 2, "medium-replay": 0}[quality]
    for k in range(episodes):
        if k < n_expert:
            policy = scripted_policy("expert", env)
        elif quality == "medium-replay":
            frac = k / (episodes - 1) if episodes > 1 else 0.0
            policy = scripted_policy("medium", env, noise=1.5 + (0.5 - 1.5) * frac)
        else:
            policy = scripted_policy("medium", env, noise=0.5)
        trajectories.append(rollout_trajectory(env, policy, _episode_seed(seed, k)))
    manifest = {
        "env_id": env_id,
        "generator": quality,
        "episodes": int(episodes),
        "seed": int(seed),
        "n_agents": cfg.n_agents,
        "obs_dim": cfg.obs_dim,
        "act_dim": cfg.act_dim,
        "episode_length": cfg.episode_length,
        "obs_encoding": OBS_ENCODING,
    }
    if quality == "medium-expert":
        manifest["mixture"] = {"expert": n_expert, "medium": episodes - n_expert}
    return Dataset(trajectories, manifest)


# augmentation ---------------------------------------------------------------

def parse_thresholds(text: str) -> list[float] | str:
    """``"10,20"`` -> ``[10.0, 20.0]``; ``"auto"`` is passed through; ``""`` -> ``[]``."""
    text = text.strip()
    if text == "auto":
        return "auto"
    if not text:
        return []
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigurationError(f"thresholds must be a comma-separated list of numbers or 'auto', got {text!r}") from None


def auto_thresholds(dataset: Dataset, return_kind: str = "joint", quantiles=(0.5, 0.7, 0.9)) -> list[float]:
    """Thresholds at the given quantiles of the dataset's trajectory returns."""
    return [float(q) for q in np.quantile(dataset.returns(return_kind), quantiles)]


def augment(dataset: Dataset, thresholds: Iterable[float], return_kind: str = "joint") -> Dataset:
    """Replicate each trajectory once for every threshold its return reaches.

    Starting from a copy of ``dataset``, each ``r`` in ``thresholds`` appends
    every trajectory with ``Return >= r``; duplicate thresholds count
    separately. Copies are index references to the same trajectory objects.
    """
    R = sorted(float(r) for r in thresholds)
    if any(not np.isfinite(r) for r in R):
        raise ConfigurationError("thresholds must be finite")
    base = list(dataset.order)
    rets = dataset.returns(return_kind)
    order = list(base)
    for r in R:
        order.extend(i for i, ret in zip(base, rets) if ret >= r)
    manifest = dict(dataset.manifest)
    manifest["augmentation"] = {"thresholds": R, "return_kind": return_kind, "source_size": len(dataset)}
    return Dataset(dataset.trajectories, manifest, order)


# minibatches ----------------------------------------------------------------

class TransitionTable:
    """Per-agent transitions of a dataset, flattened once.

    Unique trajectories are stored once; ``index`` lists one entry per
    transition of every trajectory occurrence in ``dataset.order``.
    """

    FIELDS = ("obs", "actions", "rewards", "next_obs", "dones")

    def __init__(self, dataset: Dataset, dtype=torch.float64):
        if len(dataset) == 0:
            raise ContractError("cannot sample from an empty dataset")
        trajs = dataset.trajectories
        lengths = np.array([len(t) for t in trajs])
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        # arrays are (n_agents, n_transitions, dim)
        self.arrays = {
            "obs": np.concatenate([t.obs[:-1] for t in trajs]).transpose(1, 0, 2),
            "actions": np.concatenate([t.actions for t in trajs]).transpose(1, 0, 2),
            "rewards": np.concatenate([t.rewards for t in trajs]).T[..., None],
            "next_obs": np.concatenate([t.obs[1:] for t in trajs]).transpose(1, 0, 2),
            "dones": np.concatenate([t.dones for t in trajs]).T[..., None].astype(np.float64),
        }
        self.index = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in dataset.order])
        self.tensors = {k: torch.as_tensor(v, dtype=dtype) for k, v in self.arrays.items()}
        self.index_t = torch.as_tensor(self.index)
        self.n_agents = dataset.n_agents

    def __len__(self):
        return len(self.index)

    def take(self, positions: np.ndarray, agent_index: int) -> dict:
        rows = self.index[positions]
        return {k: v[agent_index, rows] for k, v in self.arrays.items()}

    def sample(self, rng: AgentRNG, batch_size: int) -> dict:
        """Stacked minibatch for all agents, one independent draw per agent stream."""
        if rng.n_agents != self.n_agents:
            raise ContractError("rng streams must match the number of agents")
        pos = rng.integers(len(self.index), batch_size)
        rows = self.index_t[pos]
        agents = torch.arange(self.n_agents).unsqueeze(1)
        return {k: v[agents, rows] for k, v in self.tensors.items()}


def sample_minibatch(data, agent_index: int, batch_size: int, rng: np.random.Generator) -> dict:
    """``batch_size`` transitions of one agent, uniform with replacement over ``D'``."""
    table = data if isinstance(data, TransitionTable) else TransitionTable(data)
    if not (0 <= agent_index < table.n_agents):
        raise ContractError(f"agent_index {agent_index} out of range")
    pos = rng.integers(0, len(table), size=batch_size)
    return table.take(pos, agent_index)


# storage --------------------------------------------------------------------

def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        if "w" in mode:
            raw = open(path, "wb")
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            return io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), (gz, raw)
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8"), ()
    return open(path, mode, encoding="utf-8", newline="\n"), ()


def write_dataset(dataset: Dataset, path) -> None:
    """Write the manifest line and one line per trajectory occurrence."""
    path = Path(path)
    fh, extra = _open_text(path, "w")
    try:
        fh.write(json.dumps({"manifest": dataset.manifest}, sort_keys=True) + "\n")
        for traj in dataset:
            fh.write(json.dumps(traj.to_record()) + "\n")
    finally:
        fh.close()
        for h in extra:
            h.close()


def read_dataset(path) -> Dataset:
    """Load and validate a dataset file.

    Raises:
        FileNotFoundError: missing file.
        SchemaError: malformed manifest or records, or returns that do not
            match the rewards.
    """
    path = Path(path)
    fh, _ = _open_text(path, "r")
    with fh:
        try:
            first = fh.readline()
            head = json.loads(first) if first else None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: bad manifest line: {exc}") from None
        if not isinstance(head, dict) or set(head) != {"manifest"} or not isinstance(head["manifest"], dict):
            raise SchemaError(f"{path}: first line must be a single {{'manifest': ...}} object")
        trajectories = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if not isinstance(rec, dict):
                raise SchemaError(f"{path}:{lineno}: trajectory must be an object")
            trajectories.append(Trajectory.from_record(rec))
    return Dataset(trajectories, head["manifest"])
