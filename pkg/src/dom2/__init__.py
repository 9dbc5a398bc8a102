"""DOM2: diffusion offline multi-agent reinforcement learning."""
