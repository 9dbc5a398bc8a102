"""scikit-learn style front ends.

``TrajectoryAugmenter`` is a transformer over :class:`~dom2.datasets.Dataset`
objects; ``DOM2``, ``DiffusionBC`` and ``MACQL`` are estimators whose ``fit``
consumes a dataset (object or file path) and whose ``predict`` maps joint
observations to joint actions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datasets import Dataset, augment, auto_thresholds, read_dataset
from .envs import make_env
from .evaluation import EvalReport, k_eval
from .exceptions import ConfigurationError, ContractError
from .training import Checkpoint, LearnedPolicy, TrainConfig, train

__all__ = ["TrajectoryAugmenter", "DOM2", "DiffusionBC", "MACQL", "check_dataset", "check_observations"]


def check_dataset(X) -> Dataset:
    """Accept a :class:`Dataset` or a path to a dataset file."""
    if isinstance(X, Dataset):
        return X
    if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        return read_dataset(X)
    raise ContractError(f"expected a Dataset or a dataset path, got {type(X).__name__}")


def check_observations(obs, n_agents: int, obs_dim: int) -> tuple[np.ndarray, bool]:
    """Validate ``(n_agents, obs_dim)`` or ``(batch, n_agents, obs_dim)`` observations.

    Returns the 3-D array and whether the input was a single joint observation.
    """
    arr = check_array(obs, ensure_2d=False, allow_nd=True, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (n_agents, obs_dim):
        raise ContractError(f"observations must have trailing shape {(n_agents, obs_dim)}, got {arr.shape}")
    return arr, single


class TrajectoryAugmenter(TransformerMixin, BaseEstimator):
    """Replicate high-return trajectories once per threshold they reach.

    Parameters
    ----------
    thresholds : list of float or "auto"
        Threshold set; ``"auto"`` resolves to return quantiles at ``fit``.
    return_kind : {"joint", "per-agent-mean"}
    """

    def __init__(self, thresholds="auto", return_kind="joint"):
        self.thresholds = thresholds
        self.return_kind = return_kind

    def fit(self, X, y=None):
        dataset = check_dataset(X)
        if self.thresholds == "auto":
            self.thresholds_ = auto_thresholds(dataset, self.return_kind)
        elif isinstance(self.thresholds, str):
            raise ConfigurationError(f"thresholds must be a list or 'auto', got {self.thresholds!r}")
        else:
            self.thresholds_ = sorted(float(t) for t in self.thresholds)
        return self

    def transform(self, X):
        check_is_fitted(self, "thresholds_")
        return augment(check_dataset(X), self.thresholds_, self.return_kind)


class _OfflineMARL(BaseEstimator):
    _algo = "dom2"

    def __init__(
        self,
        eta=1.0,
        zeta=5.0,
        gamma=0.95,
        rho=0.005,
        N=5,
        batch_size=256,
        total_steps=50_000,
        lr_actor=5e-3,
        lr_critic=3e-4,
        M=10,
        q_norm_mode="abs",
        thresholds="auto",
        return_kind="joint",
        hidden=256,
        n_blocks=3,
        critic_hidden=256,
        actor_hidden=256,
        dropout=0.1,
        eval_every=1000,
        eval_episodes=20,
        dtype="float64",
        seed=0,
    ):
        self.eta = eta
        self.zeta = zeta
        self.gamma = gamma
        self.rho = rho
        self.N = N
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.lr_actor = lr_actor
        self.lr_critic = lr_critic
        self.M = M
        self.q_norm_mode = q_norm_mode
        self.thresholds = thresholds
        self.return_kind = return_kind
        self.hidden = hidden
        self.n_blocks = n_blocks
        self.critic_hidden = critic_hidden
        self.actor_hidden = actor_hidden
        self.dropout = dropout
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        self.dtype = dtype
        self.seed = seed

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        if isinstance(params["thresholds"], tuple):
            params["thresholds"] = list(params["thresholds"])
        return TrainConfig(algo=self._algo, **params)

    def fit(self, X, y=None, out_dir=None):
        dataset = check_dataset(X)
        self.checkpoint_, self.metrics_ = train(self.to_config(), dataset, out_dir)
        self.policy_ = LearnedPolicy.from_checkpoint(self.checkpoint_)
        self.env_id_ = dataset.env_id
        self.n_agents_, self.obs_dim_ = dataset.n_agents, dataset.obs_dim
        self._rng = np.random.default_rng([self.seed, 99])
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint):
        cfg = TrainConfig.from_dict(ckpt.config)
        est = cls(**{k: getattr(cfg, k) for k in cls().get_params()})
        est.checkpoint_, est.metrics_ = ckpt, []
        est.policy_ = LearnedPolicy.from_checkpoint(ckpt)
        est.env_id_ = ckpt.env_id
        est.n_agents_, est.obs_dim_ = ckpt.dims["n_agents"], ckpt.dims["obs_dim"]
        est._rng = np.random.default_rng([est.seed, 99])
        return est

    def predict(self, X, rng: np.random.Generator | None = None) -> np.ndarray:
        """Joint actions for ``(n_agents, obs_dim)`` or ``(batch, n_agents, obs_dim)`` input."""
        check_is_fitted(self, "policy_")
        obs, single = check_observations(X, self.n_agents_, self.obs_dim_)
        rng = self._rng if rng is None else rng
        out = np.stack([self.policy_(o, rng) for o in obs])
        return out[0] if single else out

    def evaluate(self, env_id: str | None = None, groups: int = 10, K: int = 1, seed: int = 0) -> EvalReport:
        check_is_fitted(self, "policy_")
        return k_eval(self.policy_, make_env(env_id or self.env_id_), groups, K, seed, label=self._algo)


class DOM2(_OfflineMARL):
    """Diffusion policy with Q-guidance and conservative twin critics."""

    _algo = "dom2"


class DiffusionBC(_OfflineMARL):
    """Diffusion behaviour cloning (``eta`` is ignored)."""

    _algo = "diff_bc"


class MACQL(_OfflineMARL):
    """Deterministic actor trained against conservative twin critics."""

    _algo = "ma_cql"
