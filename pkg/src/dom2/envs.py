"""Cooperative-navigation particle worlds and scripted behaviour policies.

Environment ids are ``coop_nav_3a3l`` and ``coop_nav_3a6l`` optionally
followed by a shift suffix, ``@speed=<v_min>`` or ``@dismiss=<k>``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, ContractError

__all__ = [
    "EnvConfig",
    "EnvState",
    "TransitionResult",
    "CoopNavEnv",
    "make_env",
    "parse_env_id",
    "scripted_policy",
    "ScriptedPolicy",
    "SENTINEL_OFFSET",
    "ENV_IDS",
]

SENTINEL_OFFSET = (10.0, 10.0)
ENV_IDS = ("coop_nav_3a3l", "coop_nav_3a6l")
_ID_RE = re.compile(r"^(?P<base>coop_nav_(?P<n>\d+)a(?P<m>\d+)l)(?:@(?P<kind>speed|dismiss)=(?P<value>[^@]+))?$")


def ring_landmarks(m: int) -> list[tuple[float, float]]:
    return [(math.cos(2 * math.pi * j / m), math.sin(2 * math.pi * j / m)) for j in range(m)]


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 3
    landmarks: tuple = field(default_factory=lambda: tuple(ring_landmarks(6)))
    agent_size: float = 0.1
    landmark_size: float = 0.1
    episode_length: int = 25
    dt: float = 0.1
    damping: float = 0.25
    accel: float = 5.0
    max_speed: tuple | None = None
    shift: str = "none"
    shift_value: float = 0.0
    occupy_bonus: float = 5.0
    collision_penalty: float = 1.0
    spawn_radius: float = 0.1
    env_id: str = "coop_nav_3a6l"

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigurationError("n_agents must be >= 1")
        if len(self.landmarks) < 1:
            raise ConfigurationError("need at least one landmark")
        if self.agent_size <= 0 or self.landmark_size <= 0:
            raise ConfigurationError("agent and landmark sizes must be positive")
        if self.dt <= 0 or not (0.0 <= self.damping < 1.0):
            raise ConfigurationError("need dt > 0 and 0 <= damping < 1")
        if self.episode_length < 1:
            raise ConfigurationError("episode_length must be >= 1")
        if self.max_speed is not None and len(self.max_speed) != self.n_agents:
            raise ConfigurationError("max_speed needs one entry per agent")
        if self.shift not in ("none", "speed", "dismiss"):
            raise ConfigurationError(f"unknown shift {self.shift!r}")
        if self.shift == "speed" and not (0.0 < self.shift_value <= 1.0):
            raise ConfigurationError(f"speed shift needs 0 < v_min <= 1, got {self.shift_value}")
        if self.shift == "dismiss":
            k = self.shift_value
            if k != int(k) or not (0 <= k < len(self.landmarks)):
                raise ConfigurationError(f"dismiss(k) needs an integer 0 <= k < {len(self.landmarks)}, got {k}")

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    @property
    def obs_dim(self) -> int:
        return 4 + 2 * self.n_landmarks + 2 * (self.n_agents - 1)

    @property
    def act_dim(self) -> int:
        return 2


def parse_env_id(env_id: str) -> EnvConfig:
    """Build an :class:`EnvConfig` from an id such as ``coop_nav_3a6l@dismiss=3``."""
    m = _ID_RE.match(env_id)
    if m is None or m.group("base") not in ENV_IDS:
        raise ConfigurationError(f"unknown environment id {env_id!r}")
    n, n_landmarks = int(m.group("n")), int(m.group("m"))
    shift, value = "none", 0.0
    if m.group("kind"):
        shift = m.group("kind")
        try:
            value = float(m.group("value"))
        except ValueError:
            raise ConfigurationError(f"bad shift value in {env_id!r}") from None
    return EnvConfig(
        n_agents=n,
        landmarks=tuple(ring_landmarks(n_landmarks)),
        shift=shift,
        shift_value=value,
        env_id=env_id,
    )


def base_env_id(env_id: str) -> str:
    return env_id.split("@", 1)[0]


@dataclass
class EnvState:
    positions: np.ndarray
    velocities: np.ndarray
    active: np.ndarray
    max_speed: np.ndarray
    step: int = 0


@dataclass
class TransitionResult:
    obs: np.ndarray
    rewards: np.ndarray
    done: bool
    info: dict


class CoopNavEnv:
    """n agents, m landmarks; agents are rewarded for covering landmarks."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.landmarks = np.asarray(config.landmarks, dtype=np.float64)
        self.state: EnvState | None = None

    @property
    def obs_dim(self):
        return self.config.obs_dim

    @property
    def act_dim(self):
        return self.config.act_dim

    @property
    def n_agents(self):
        return self.config.n_agents

    def reset(self, seed: int) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(seed)
        radius = cfg.spawn_radius * np.sqrt(rng.uniform(size=cfg.n_agents))
        angle = rng.uniform(0.0, 2 * np.pi, size=cfg.n_agents)
        positions = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        active = np.ones(cfg.n_landmarks, dtype=bool)
        if cfg.shift == "dismiss":
            active[rng.choice(cfg.n_landmarks, size=int(cfg.shift_value), replace=False)] = False
        if cfg.shift == "speed":
            max_speed = rng.uniform(cfg.shift_value, 1.0, size=cfg.n_agents)
        elif cfg.max_speed is not None:
            max_speed = np.asarray(cfg.max_speed, dtype=np.float64)
        else:
            max_speed = np.ones(cfg.n_agents)
        self.state = EnvState(positions, np.zeros_like(positions), active, max_speed, 0)
        return self.observe()

    def observe(self) -> np.ndarray:
        s, cfg = self.state, self.config
        n = cfg.n_agents
        rel_lm = self.landmarks[None, :, :] - s.positions[:, None, :]
        rel_lm[:, ~s.active, :] = SENTINEL_OFFSET
        rel_ag = s.positions[None, :, :] - s.positions[:, None, :]
        others = np.stack([np.delete(rel_ag[j], j, axis=0) for j in range(n)]) if n > 1 else np.zeros((1, 0, 2))
        return np.concatenate(
            [s.velocities, s.positions, rel_lm.reshape(n, -1), others.reshape(n, -1)], axis=1
        )

    def rewards(self) -> tuple[np.ndarray, dict]:
        s, cfg = self.state, self.config
        d_lm = np.linalg.norm(s.positions[:, None, :] - self.landmarks[None, s.active, :], axis=-1)
        min_d = d_lm.min(axis=1)
        d_ag = np.linalg.norm(s.positions[:, None, :] - s.positions[None, :, :], axis=-1)
        close = d_ag < 2 * cfg.agent_size
        np.fill_diagonal(close, False)
        n_coll = close.sum(axis=1)
        occupied = min_d < cfg.agent_size + cfg.landmark_size
        r = -min_d + cfg.occupy_bonus * occupied - cfg.collision_penalty * n_coll
        return r, {"collisions": int(n_coll.sum() // 2), "min_distances": min_d, "occupied": occupied}

    def step(self, actions) -> TransitionResult:
        s, cfg = self.state, self.config
        if s is None:
            raise ContractError("call reset() before step()")
        if s.step >= cfg.episode_length:
            raise ContractError("episode is done; call reset()")
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (cfg.n_agents, cfg.act_dim):
            raise ContractError(f"actions must have shape {(cfg.n_agents, cfg.act_dim)}, got {actions.shape}")
        actions = np.clip(actions, -1.0, 1.0)
        v = (1.0 - cfg.damping) * s.velocities + actions * cfg.accel * cfg.dt
        speed = np.linalg.norm(v, axis=1)
        over = speed > s.max_speed
        v[over] *= (s.max_speed[over] / speed[over])[:, None]
        s.velocities = v
        s.positions = s.positions + v * cfg.dt
        s.step += 1
        r, info = self.rewards()
        return TransitionResult(self.observe(), r, s.step == cfg.episode_length, info)


def make_env(config) -> CoopNavEnv:
    """Accepts an :class:`EnvConfig` or an environment id string."""
    if isinstance(config, str):
        config = parse_env_id(config)
    return CoopNavEnv(config)


# scripted behaviour policies ------------------------------------------------

def _unpack(obs: np.ndarray, n_agents: int, n_landmarks: int, j: int):
    o = obs[j]
    vel, pos = o[0:2], o[2:4]
    rel_lm = o[4 : 4 + 2 * n_landmarks].reshape(n_landmarks, 2)
    active = ~np.all(rel_lm == SENTINEL_OFFSET, axis=1)
    rel_ag = o[4 + 2 * n_landmarks :].reshape(n_agents - 1, 2)
    agents = np.insert(pos + rel_ag, j, pos, axis=0)
    return vel, pos, pos + rel_lm, active, agents


def greedy_assignment(agent_pos: np.ndarray, landmark_pos: np.ndarray) -> np.ndarray:
    """Unique greedy matching of agents to landmarks by smallest distance.

    Exact ties go to the lower agent index (then lower landmark index).
    Agents left over when landmarks run out take their nearest landmark.
    """
    n, m = len(agent_pos), len(landmark_pos)
    dist = np.linalg.norm(agent_pos[:, None, :] - landmark_pos[None, :, :], axis=-1)
    target = np.full(n, -1)
    work = dist.copy()
    for _ in range(min(n, m)):
        flat = int(np.argmin(work))
        a, l = divmod(flat, m)
        target[a] = l
        work[a, :] = np.inf
        work[:, l] = np.inf
    for a in np.flatnonzero(target < 0):
        target[a] = int(np.argmin(dist[a]))
    return target


class ScriptedPolicy:
    """Joint scripted policy: ``policy(obs, rng) -> actions`` of shape (n_agents, 2).

    Each agent decides from its own observation only (it can reconstruct
    the other agents' positions from its relative-position features).
    """

    def __init__(self, kind: str, n_agents: int, n_landmarks: int, noise: float = 0.5, kp: float = 2.0, kd: float = 0.6):
        if kind not in ("expert", "medium", "random"):
            raise ConfigurationError(f"unknown scripted policy kind {kind!r}")
        self.kind, self.n_agents, self.n_landmarks = kind, n_agents, n_landmarks
        self.noise, self.kp, self.kd = noise, kp, kd

    def expert_actions(self, obs: np.ndarray) -> np.ndarray:
        actions = np.zeros((self.n_agents, 2))
        for j in range(self.n_agents):
            vel, pos, lms, active, agents = _unpack(obs, self.n_agents, self.n_landmarks, j)
            idx = np.flatnonzero(active)
            target = greedy_assignment(agents, lms[idx])[j]
            actions[j] = np.clip(self.kp * (lms[idx[target]] - pos) - self.kd * vel, -1.0, 1.0)
        return actions

    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "random":
            return rng.uniform(-1.0, 1.0, size=(self.n_agents, 2))
        a = self.expert_actions(obs)
        if self.kind == "medium":
            a = np.clip(a + rng.normal(0.0, self.noise, size=a.shape), -1.0, 1.0)
        return a


def scripted_policy(kind: str, env: CoopNavEnv, noise: float = 0.5) -> ScriptedPolicy:
    return ScriptedPolicy(kind, env.config.n_agents, env.config.n_landmarks, noise=noise)
