"""Cost-lookahead switching between the control and safe actors.

At every environment step the control actor is rolled forward in latent
space; if the posterior cost plus the imagined costs exceed the planning
budget, the safe actor acts instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PlanDiagnostics:
    c_obs: float
    c_imagined: list = field(default_factory=list)
    c_sum: float = 0.0
    chose_safe: int = 0


def planner_budget(budget: float, horizon: int, episode_length: int, scale: float = 1.0) -> float:
    """Spread the per-episode budget over the H+1 steps the planner looks at."""
    return scale * budget * (horizon + 1) / episode_length


def predicted_cost_sum(posterior, model, control_actor, horizon: int, wm_params=None):
    """(c_obs, [c_1..c_H]) from the cost head, rolling out the control actor's mean action on prior means."""
    c_obs = float(np.asarray(model.head("cost", posterior.feat, wm_params).data).reshape(-1)[0])
    imagined = []
    state = posterior
    for _ in range(horizon):
        a = control_actor.act(state, "mean")
        state = model.imagine_step(state, a, params=wm_params, use_mean=True)
        imagined.append(float(np.asarray(model.head("cost", state.feat, wm_params).data).reshape(-1)[0]))
    return c_obs, imagined


def plan_action(posterior, model, control_actor, safe_actor, horizon: int, b_s: float, rng,
                mode: str = "sample", wm_params=None, force_control: bool = False):
    """Choose the acting policy for one step and draw its action.

    ``model`` needs ``head("cost", feat)`` and ``imagine_step(state, action, use_mean=True)``;
    the actors need ``act(state, mode, rng)``. Nothing here records a tape or
    touches parameters. With ``force_control`` (warm-up before any training)
    the control actor acts regardless of the prediction.
    """
    if horizon < 0:
        raise ValueError("planning horizon must be >= 0")
    c_obs, imagined = predicted_cost_sum(posterior, model, control_actor, horizon, wm_params)
    c_sum = c_obs + sum(imagined)
    chose_safe = int(c_sum > b_s) and not force_control
    actor = safe_actor if chose_safe else control_actor
    action = actor.act(posterior, mode, rng)
    return action, PlanDiagnostics(c_obs, imagined, c_sum, int(chose_safe))
