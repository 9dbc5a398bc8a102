"""Per-agent random streams.

Every agent owns one ``torch.Generator``. Draws are made per agent and
stacked along a leading agent axis, so agent ``j``'s randomness never
depends on how many other agents share the computation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

__all__ = ["AgentRNG", "derive_seed"]


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


class AgentRNG:
    def __init__(self, seeds: Sequence[int]):
        self.seeds = [int(s) for s in seeds]
        self.generators = []
        for s in self.seeds:
            g = torch.Generator()
            g.manual_seed(s)
            self.generators.append(g)

    @classmethod
    def from_seed(cls, seed: int, n_agents: int, stream: int = 0, shared: bool = False) -> "AgentRNG":
        """One stream per agent; ``shared=True`` gives every agent the same seed."""
        return cls([derive_seed(seed, stream, 0 if shared else j) for j in range(n_agents)])

    @property
    def n_agents(self) -> int:
        return len(self.generators)

    def normal(self, *shape, dtype=torch.float64) -> torch.Tensor:
        return torch.stack([torch.randn(*shape, generator=g, dtype=dtype) for g in self.generators])

    def uniform(self, *shape, low: float = 0.0, high: float = 1.0, dtype=torch.float64) -> torch.Tensor:
        u = torch.stack([torch.rand(*shape, generator=g, dtype=dtype) for g in self.generators])
        if low == 0.0 and high == 1.0:
            return u
        return u * (high - low) + low

    def integers(self, high, size: int) -> torch.Tensor:
        """Uniform integers in ``[0, high[j])`` for each agent; ``high`` may be per-agent."""
        if np.ndim(high) == 0:
            high = [int(high)] * self.n_agents
        return torch.stack(
            [torch.randint(int(h), (size,), generator=g) for h, g in zip(high, self.generators)]
        )

    def get_state(self) -> list[bytes]:
        return [bytes(g.get_state().numpy().tobytes()) for g in self.generators]

    def set_state(self, states: Sequence[bytes]) -> None:
        if len(states) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} generator states, got {len(states)}")
        for g, s in zip(self.generators, states):
            g.set_state(torch.from_numpy(np.frombuffer(s, dtype=np.uint8).copy()))
