"""Evaluation protocols, normalised scores, reports and SVG plots.

A *policy* here is any callable ``policy(obs, rng) -> actions`` mapping the
joint observation ``(n_agents, obs_dim)`` and a numpy generator to joint
actions ``(n_agents, act_dim)``. Policies may expose ``greedy`` (dropout
switch) and ``n_agents``/``obs_dim`` style attributes but need not.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import CoopNavEnv, make_env
from .exceptions import ContractError, SchemaError
from .rng import derive_seed

__all__ = [
    "EvalReport",
    "run_episode",
    "rollout",
    "rollout_tensor",
    "k_eval",
    "k_eval_from_tensor",
    "normalized_score",
    "REFERENCE_SCORES",
    "PAPER_REFERENCE_SCORES",
    "reference_protocol_scores",
    "emit_plots",
    "PlotSummary",
    "load_report",
]

# (expert, random) mean joint returns of the scripted policies, measured with
# ``reference_protocol_scores(env_id)`` (100 episodes, seed 0).
REFERENCE_SCORES: dict[str, tuple[float, float]] = {
    "coop_nav_3a3l": (228.3545119021537, -81.52635912263375),
    "coop_nav_3a6l": (232.68038413965428, -70.83714096668838),
}

# Reference pairs reported for the original benchmark suites; documentation
# constants only (they belong to different simulators).
PAPER_REFERENCE_SCORES: dict[str, tuple[float, float]] = {
    "mpe/cooperative_navigation": (516.8, 159.8),
    "mpe/predator_prey": (185.6, -4.1),
    "mpe/world": (79.5, -6.8),
}

DISMISS_MASK_POLICY = "fixed per group: the K repeats of a group share the initialisation seed and hence the dismissed-landmark mask"


def _policy_rng(seed: int, episode: int, repeat: int) -> np.random.Generator:
    return np.random.default_rng([seed, episode, repeat])


def _reset_seed(seed: int, episode: int) -> int:
    return derive_seed(seed, episode)


def run_episode(policy, env: CoopNavEnv, reset_seed: int, rng: np.random.Generator) -> float:
    """Play one episode and return the joint (summed over agents) return."""
    obs = env.reset(reset_seed)
    total = 0.0
    while True:
        actions = np.asarray(policy(obs, rng), dtype=np.float64)
        if actions.shape != (env.n_agents, env.act_dim):
            raise ContractError(f"policy returned actions of shape {actions.shape}, expected {(env.n_agents, env.act_dim)}")
        res = env.step(actions)
        total += float(res.rewards.sum())
        obs = res.obs
        if res.done:
            return total


def _check_dims(policy, env: CoopNavEnv) -> None:
    actor = getattr(policy, "actor", None)
    n = getattr(actor, "n_agents", getattr(policy, "n_agents", None))
    d = getattr(actor, "obs_dim", None)
    if n is not None and n != env.n_agents:
        raise ContractError(f"policy controls {n} agents but the environment has {env.n_agents}")
    if d is not None and d != env.obs_dim:
        raise ContractError(f"policy expects obs_dim={d} but the environment emits {env.obs_dim}")


def _with_greedy(policy, greedy: bool):
    prev = getattr(policy, "greedy", None)
    if prev is not None:
        policy.greedy = greedy
    return prev


def rollout(policy, env: CoopNavEnv, episodes: int, seed: int, greedy: bool = True) -> list[float]:
    """Per-episode joint returns of ``episodes`` episodes, deterministic in ``seed``.

    Episode ``e`` resets the environment with ``derive_seed(seed, e)`` and
    feeds the policy ``default_rng([seed, e, 0])``.
    """
    if episodes < 0:
        raise ContractError("episodes must be non-negative")
    _check_dims(policy, env)
    prev = _with_greedy(policy, greedy)
    try:
        return [run_episode(policy, env, _reset_seed(seed, e), _policy_rng(seed, e, 0)) for e in range(episodes)]
    finally:
        if prev is not None:
            policy.greedy = prev


def rollout_tensor(policy, env: CoopNavEnv, groups: int, K: int, seed: int, greedy: bool = True) -> np.ndarray:
    """Returns of shape ``(groups, K)``: group ``g`` shares its reset seed,
    repeat ``k`` uses policy noise ``default_rng([seed, g, k])``."""
    if K < 1:
        raise ContractError("K must be >= 1")
    if groups < 0:
        raise ContractError("groups must be non-negative")
    _check_dims(policy, env)
    prev = _with_greedy(policy, greedy)
    try:
        out = np.empty((groups, K))
        for g in range(groups):
            for k in range(K):
                out[g, k] = run_episode(policy, env, _reset_seed(seed, g), _policy_rng(seed, g, k))
        return out
    finally:
        if prev is not None:
            policy.greedy = prev


@dataclass
class EvalReport:
    env_id: str
    episodes: int
    K: int
    groups: int
    seed: int
    mean: float
    std: float
    normalized_score: float | None
    returns: list[float]
    label: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.episodes if self.K == 1 else self.groups * self.K
        if len(self.returns) != expected:
            raise ContractError(f"report holds {len(self.returns)} returns, expected {expected}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(f"not an evaluation report: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def k_eval_from_tensor(returns: np.ndarray) -> tuple[float, float]:
    """Mean and std over groups of the per-group maximum."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.ndim != 2 or returns.shape[1] < 1:
        raise ContractError("need a (groups, K) return tensor with K >= 1")
    best = returns.max(axis=1)
    return float(best.mean()), float(best.std())


def k_eval(
    policy,
    env: CoopNavEnv,
    groups: int = 10,
    K: int = 1,
    seed: int = 0,
    label: str = "",
    greedy: bool = True,
) -> EvalReport:
    """K-rollout evaluation: per group the best of K episodes from one initialisation."""
    tensor = rollout_tensor(policy, env, groups, K, seed, greedy)
    mean, std = k_eval_from_tensor(tensor) if groups else (float("nan"), float("nan"))
    env_id = env.config.env_id
    try:
        norm = normalized_score(mean, env_id)
    except KeyError:
        norm = None
    notes = {"dismiss_mask": DISMISS_MASK_POLICY} if env.config.shift == "dismiss" else {}
    return EvalReport(
        env_id=env_id,
        episodes=groups * K,
        K=K,
        groups=groups,
        seed=seed,
        mean=mean,
        std=std,
        normalized_score=norm,
        returns=[float(x) for x in tensor.reshape(-1)],
        label=label,
        notes=notes,
    )


def normalized_score(raw_mean: float, env_id: str, references: tuple[float, float] | None = None) -> float:
    """``100 (raw - random) / (expert - random)`` against a registered reference pair.

    Shift suffixes are ignored when looking up ``env_id``. Raises ``KeyError``
    for an unregistered id unless ``references=(expert, random)`` is given.
    """
    if references is None:
        key = env_id.split("@", 1)[0]
        if key in REFERENCE_SCORES:
            references = REFERENCE_SCORES[key]
        elif key in PAPER_REFERENCE_SCORES:
            references = PAPER_REFERENCE_SCORES[key]
        else:
            raise KeyError(f"no reference scores registered for {env_id!r}")
    expert, random = references
    if expert == random:
        raise ContractError("expert and random reference scores coincide")
    return 100.0 * (raw_mean - random) / (expert - random)


def reference_protocol_scores(env_id: str, episodes: int = 100, seed: int = 0) -> tuple[float, float]:
    """Measure the (expert, random) scripted-policy mean joint returns."""
    from .envs import scripted_policy

    env = make_env(env_id)
    expert = rollout(scripted_policy("expert", env), env, episodes, seed)
    random = rollout(scripted_policy("random", env), env, episodes, seed)
    return float(np.mean(expert)), float(np.mean(random))


def load_report(path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text(encoding="utf-8"))


# plots ---------------------------------------------------------------------

@dataclass
class PlotSummary:
    kind: str
    n_bars: int
    n_lines: int


def _bar_chart(ax, reports: Sequence[EvalReport]) -> int:
    labels = sorted({r.label or "policy" for r in reports})
    envs = sorted({r.env_id for r in reports})
    width = 0.8 / len(labels)
    n = 0
    for i, lab in enumerate(labels):
        xs, ys, es = [], [], []
        for j, env in enumerate(envs):
            match = [r for r in reports if (r.label or "policy") == lab and r.env_id == env]
            if match:
                xs.append(j + (i - (len(labels) - 1) / 2) * width)
                ys.append(float(np.mean([r.mean for r in match])))
                es.append(float(np.mean([r.std for r in match])))
        ax.bar(xs, ys, width=width, yerr=es, capsize=3, label=lab)
        n += len(xs)
    ax.set_xticks(range(len(envs)), envs)
    ax.set_ylabel("return")
    ax.legend()
    return n


def _line_chart(ax, series: dict, xlabel: str) -> int:
    for name in sorted(series):
        pts = sorted(series[name])
        x = [p[0] for p in pts]
        y = np.array([p[1] for p in pts], dtype=float)
        e = np.array([p[2] for p in pts], dtype=float)
        ax.plot(x, y, marker="o", label=name)
        ax.fill_between(x, y - e, y + e, alpha=0.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("return")
    ax.legend()
    return len(series)


def emit_plots(inputs, out_path, xlabel: str = "step") -> PlotSummary:
    """Write an SVG chart; byte-stable for identical input.

    ``inputs`` is either a sequence of :class:`EvalReport` (grouped bar chart:
    one bar per label x env), a sequence of metrics records (one line per
    ``label`` of the eval records, x = step), or a mapping
    ``{series: [(x, mean, std), ...]}`` (one line per series, e.g. an ablation
    sweep over eta with one series per dataset tier).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if inputs is None or len(inputs) == 0:
        raise ContractError("emit_plots needs non-empty input")
    matplotlib.rcParams["svg.hashsalt"] = "dom2"
    matplotlib.rcParams["svg.fonttype"] = "path"
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        if isinstance(inputs, dict):
            n_lines, n_bars, kind = _line_chart(ax, inputs, xlabel), 0, "line"
        elif all(isinstance(r, EvalReport) for r in inputs):
            n_bars, n_lines, kind = _bar_chart(ax, list(inputs)), 0, "bar"
        elif all(isinstance(r, dict) for r in inputs):
            series: dict = {}
            for rec in inputs:
                if rec.get("eval_return_mean") is not None:
                    series.setdefault(rec.get("label", "eval"), []).append(
                        (rec["step"], rec["eval_return_mean"], rec.get("eval_return_std") or 0.0)
                    )
            if not series:
                raise ContractError("metrics input holds no evaluation records")
            n_lines, n_bars, kind = _line_chart(ax, series, xlabel), 0, "line"
        else:
            raise ContractError("emit_plots input must be reports, metrics records or a series mapping")
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return PlotSummary(kind, n_bars, n_lines)
