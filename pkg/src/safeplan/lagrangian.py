"""Dual multiplier for the cost constraint, driven by a moving window of real costs."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field


@dataclass
class LagrangeState:
    multiplier: float = 1.0
    alpha: float = 0.02
    budget: float = 25.0
    lam_min: float = 1e-3
    lam_max: float = 100.0
    window: int = 50
    episode_length: int = 500
    paper_sign: bool = False
    costs: deque = field(default_factory=deque)

    def __post_init__(self):
        self.costs = deque(self.costs, maxlen=self.window)
        self.multiplier = min(max(self.multiplier, self.lam_min), self.lam_max)


def record_cost(state: LagrangeState, cost: float) -> LagrangeState:
    if not cost >= 0:
        raise ValueError(f"cost must be non-negative, got {cost}")
    state.costs.append(float(cost))
    return state


def mean_cost(state: LagrangeState) -> float:
    """Window mean of per-step costs, expressed per episode (mean * episode_length)."""
    if not state.costs:
        raise ValueError("cost window is empty")
    return sum(state.costs) / len(state.costs) * state.episode_length


def update_multiplier(state: LagrangeState) -> LagrangeState:
    """lambda <- clip(lambda + alpha * (C_k - budget), lam_min, lam_max).

    With ``paper_sign`` the residual enters with a minus sign instead.
    """
    residual = mean_cost(state) - state.budget
    step = -state.alpha * residual if state.paper_sign else state.alpha * residual
    state.multiplier = min(max(state.multiplier + step, state.lam_min), state.lam_max)
    return state
