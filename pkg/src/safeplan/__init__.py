"""Safe latent-model reinforcement learning with cost-aware policy switching."""

__version__ = "0.1.0"
