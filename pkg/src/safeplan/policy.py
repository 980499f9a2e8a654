"""Control actor, safe actor, reward and cost critics.

Both actors are trained on imagined trajectories. Rollouts run against frozen
copies of the world-model parameters, so actor gradients flow through the
imagined dynamics without ever touching the model itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safeplan.distributions import TruncNormal, gaussian_log_prob
from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Tensor
from safeplan.nn.params import ParamSet, init_mlp, mlp_forward
from safeplan.world_model import LatentState, WorldModel

CONTROL = "actor_c"
SAFE = "actor_s"
REWARD_CRITIC = "critic_r"
COST_CRITIC = "critic_c"


@dataclass(frozen=True)
class PolicyConfig:
    horizon: int = 15
    lam: float = 0.95
    gamma: float = 0.99
    eta: float = 3e-4
    actor_lr: float = 4e-5
    critic_lr: float = 1e-4
    hidden: int = 128
    layers: int = 2
    std_floor: float = 0.1
    target_every: int = 100
    grad_clip: float = 100.0


class Actor:
    """MLP over latent features producing a truncated-normal action head."""

    def __init__(self, name: str, feat_dim: int, act_dim: int, cfg: PolicyConfig = PolicyConfig(), rng=None,
                 params: ParamSet | None = None):
        self.name = name
        self.cfg = cfg
        self.sizes = [feat_dim] + [cfg.hidden] * cfg.layers + [2 * act_dim]
        if params is None:
            params = ParamSet()
            init_mlp(params, name, self.sizes, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def dist(self, feat: Tensor, params=None) -> TruncNormal:
        raw = mlp_forward(self.params if params is None else params, self.name, feat, self.sizes)
        return TruncNormal.from_raw(raw, self.cfg.std_floor)

    def act(self, state: LatentState, mode: str = "sample", rng=None, params=None) -> np.ndarray:
        """Action in [-1, 1]; ``mode`` is "sample" or "mean"."""
        d = self.dist(state.feat, params)
        if mode == "mean":
            return d.mode().data.copy()
        if mode == "sample":
            return d.sample(rng).data.copy()
        raise ValueError(f"unknown act mode {mode!r}")


class Critic:
    def __init__(self, name: str, feat_dim: int, cfg: PolicyConfig = PolicyConfig(), rng=None,
                 params: ParamSet | None = None):
        self.name = name
        self.sizes = [feat_dim] + [cfg.hidden] * cfg.layers + [1]
        if params is None:
            params = ParamSet()
            init_mlp(params, name, self.sizes, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def __call__(self, feat: Tensor, params=None) -> Tensor:
        return mlp_forward(self.params if params is None else params, self.name, feat, self.sizes)[..., 0]


@dataclass
class ImaginedTrajectory:
    """Stacked over time: ``feats`` has H+1 entries, per-step quantities H."""

    states: list
    feats: Tensor          # (H+1, N, F)
    actions: Tensor        # (H, N, A)
    log_probs: Tensor | None  # (H, N), only when requested
    entropies: Tensor      # (H, N)
    rewards: Tensor        # (H, N)
    costs: Tensor          # (H, N)
    discounts: Tensor      # (H, N), gamma * continuation probability
    reward_values: Tensor | None  # (H+1, N)
    cost_values: Tensor | None    # (H+1, N)

    @property
    def horizon(self):
        return self.actions.shape[0]


@dataclass
class LambdaTargets:
    values: Tensor  # (H, ...)
    lam: float


def rollout(actor: Actor, wm: WorldModel, start: LatentState, horizon: int, rng, wm_params=None,
            actor_params=None, critics=None, gamma: float = 0.99, heads=("reward", "cost"),
            with_log_probs: bool = False) -> ImaginedTrajectory:
    """Imagine ``horizon`` steps from ``start`` under ``actor``.

    ``wm_params`` should be frozen copies. ``critics`` maps "reward"/"cost" to
    a (critic, frozen params) pair; value entries for missing critics, and
    head outputs not listed in ``heads``, are left as None. Action
    log-probabilities are not needed by the dynamics-backprop losses and are
    only computed with ``with_log_probs``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    wm_params = wm.params.frozen() if wm_params is None else wm_params
    critics = critics or {}
    state = start.detach()
    states = [state]
    actions, logps, ents = [], [], []
    for _ in range(horizon):
        d = actor.dist(ad.stop_gradient(state.feat), actor_params)
        a = d.sample(rng)
        actions.append(a)
        if with_log_probs:
            logps.append(d.log_prob(ad.stop_gradient(a)))
        ents.append(d.entropy())
        state = wm.imagine_step(state, a, rng, wm_params)
        states.append(state)
    feats = ad.stack([s.feat for s in states])
    nxt = feats[1:]
    rewards = wm.head("reward", nxt, wm_params) if "reward" in heads else None
    costs = wm.head("cost", nxt, wm_params) if "cost" in heads else None
    discounts = ad.sigmoid(wm.head("discount", nxt, wm_params)) * gamma
    values = {}
    for key in ("reward", "cost"):
        if key in critics:
            critic, params = critics[key]
            values[key] = critic(feats, params)
    return ImaginedTrajectory(states, feats, ad.stack(actions), ad.stack(logps) if logps else None, ad.stack(ents),
                              rewards, costs, discounts, values.get("reward"), values.get("cost"))


def lambda_targets(rewards, discounts, values, lam: float) -> LambdaTargets:
    """Backward recursion V_t = r_t + g_t * ((1 - lam) * v_{t+1} + lam * V_{t+1}), V_H = v_H.

    Inputs are indexed along axis 0: rewards and discounts have H entries,
    values H + 1. Works on tensors (differentiable) or arrays.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    r = rewards if isinstance(rewards, Tensor) else Tensor(np.asarray(rewards, dtype=np.float64))
    g = discounts if isinstance(discounts, Tensor) else Tensor(np.asarray(discounts, dtype=r.data.dtype))
    v = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=r.data.dtype))
    H = r.shape[0]
    if g.shape[0] != H or v.shape[0] != H + 1:
        raise ValueError(f"length mismatch: rewards {H}, discounts {g.shape[0]}, values {v.shape[0]} (need H+1)")
    nxt = v[H]
    out = [None] * H
    for t in reversed(range(H)):
        nxt = r[t] + g[t] * ((1.0 - lam) * v[t + 1] + lam * nxt)
        out[t] = nxt
    return LambdaTargets(ad.stack(out), lam)


def control_actor_loss(traj: ImaginedTrajectory, targets: LambdaTargets, eta: float) -> Tensor:
    """mean(-V^lambda - eta * H[pi]); gradients flow through the imagined dynamics."""
    return (-targets.values - eta * traj.entropies).mean()


def safe_actor_loss(traj: ImaginedTrajectory, cost_targets: LambdaTargets, lagrange_mult: float,
                    disc_scores: Tensor, eta: float) -> Tensor:
    """mean(lambda_p * C^lambda - log D(s, a) - eta * H[pi])."""
    return (lagrange_mult * cost_targets.values - disc_scores - eta * traj.entropies).mean()


def critic_loss(critic: Critic, feats: Tensor, targets: LambdaTargets, params=None) -> Tensor:
    """Negative unit-variance Gaussian log-likelihood of detached targets."""
    pred = critic(ad.stop_gradient(feats), params)
    return -gaussian_log_prob(ad.stop_gradient(targets.values), pred).mean()


def act(actor: Actor, state: LatentState, mode: str = "sample", rng=None, params=None) -> np.ndarray:
    return actor.act(state, mode, rng, params)
