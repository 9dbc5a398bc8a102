"""Variance-preserving noise schedule on a uniform grid of diffusion times.

The schedule follows the discrete definition

    beta(tau)  = 1 - exp(h(tau))
    h(tau)     = -beta_min / (N + 1) - (beta_max - beta_min) * (2 N tau + 1) / (2 (N + 1)^2)
    alpha(tau) = 1 - beta(tau) = exp(h(tau))
    sigma(tau) = sqrt(1 - alpha(tau)^2)

with ``tau_i = i / N``.  Note that ``alpha`` is *not* a cumulative product
of ``1 - beta`` as in DDPM; ``h`` is the log of ``alpha`` directly, which also
gives the smooth continuous extension used by the ODE integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DomainError

__all__ = ["NoiseSchedule", "build_schedule", "drift_diffusion"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretised VP schedule. Immutable; derived arrays are float64.

    Only ``(N, beta_min, beta_max)`` are stored when serialised; the arrays
    are recomputed on construction.
    """

    N: int
    beta_min: float = 0.1
    beta_max: float = 20.0
    tau: np.ndarray = field(init=False, repr=False, compare=False)
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha: np.ndarray = field(init=False, repr=False, compare=False)
    sigma: np.ndarray = field(init=False, repr=False, compare=False)
    lam: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if isinstance(self.N, bool) or not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ConfigurationError(f"N must be a positive integer, got {self.N!r}")
        if not (0.0 < self.beta_min < self.beta_max) or not math.isfinite(self.beta_max):
            raise ConfigurationError(
                f"need 0 < beta_min < beta_max, got beta_min={self.beta_min}, beta_max={self.beta_max}"
            )
        tau = np.arange(self.N + 1, dtype=np.float64) / self.N
        log_alpha = self.log_alpha(tau)
        alpha = np.exp(log_alpha)
        beta = -np.expm1(log_alpha)
        # 1 - alpha^2 without cancellation for alpha close to 1
        sigma = np.sqrt(-np.expm1(2.0 * log_alpha))
        lam = log_alpha - np.log(sigma)
        for name, arr in (("tau", tau), ("beta", beta), ("alpha", alpha), ("sigma", sigma), ("lam", lam)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # continuous extension -------------------------------------------------
    @property
    def slope(self) -> float:
        """d log(alpha) / d tau, constant in tau."""
        n = self.N
        return -(self.beta_max - self.beta_min) * n / (n + 1) ** 2

    def log_alpha(self, tau):
        n = self.N
        tau = np.asarray(tau, dtype=np.float64)
        return -self.beta_min / (n + 1) - (self.beta_max - self.beta_min) * (2 * n * tau + 1) / (2 * (n + 1) ** 2)

    def alpha_at(self, tau):
        return np.exp(self.log_alpha(tau))

    def sigma_at(self, tau):
        return np.sqrt(-np.expm1(2.0 * self.log_alpha(tau)))

    def nearest_index(self, tau) -> int:
        """Grid index closest to a continuous time (ties round half to even)."""
        return int(np.clip(np.rint(np.asarray(tau) * self.N), 0, self.N))

    def to_dict(self) -> dict:
        return {"N": int(self.N), "beta_min": float(self.beta_min), "beta_max": float(self.beta_max)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(int(d["N"]), float(d["beta_min"]), float(d["beta_max"]))


def build_schedule(N: int, beta_min: float = 0.1, beta_max: float = 20.0) -> NoiseSchedule:
    """Build the VP schedule on ``N + 1`` uniformly spaced diffusion times.

    Raises:
        ConfigurationError: if ``N < 1`` or ``beta_min >= beta_max`` or
            ``beta_min <= 0``.
    """
    return NoiseSchedule(N, float(beta_min), float(beta_max))


def drift_diffusion(schedule: NoiseSchedule, tau: float) -> tuple[float, float]:
    """Drift ``f = d log alpha / d tau`` and squared diffusion ``g^2`` at ``tau``.

    With ``sigma^2 = 1 - exp(2h)`` one has ``d sigma^2/d tau = -2 h' exp(2h)``,
    so ``g^2 = d sigma^2/d tau - 2 f sigma^2 = -2 h'`` for every ``tau``.
    """
    tau = float(tau)
    if not (0.0 <= tau <= 1.0):
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    f = schedule.slope
    return f, -2.0 * f
