"""Recurrent latent dynamics model.

Seven learned pieces share one deterministic path:

* recurrent cell  h_t = GRU(h_{t-1}, [z_{t-1}, a_t])
* encoder         q(z_t | h_t, o_t)   (posterior)
* transition      p(z_t | h_t)        (prior)
* decoder, reward, cost and discount heads on feat_t = [h_t, z_t]

``observe_step`` advances with an observation, ``imagine_step`` without one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from safeplan.distributions import (
    DiagGaussian,
    bernoulli_log_prob,
    diag_gaussian_kl_elem,
    gaussian_log_prob,
)
from safeplan.errors import NumericError, ShapeError
from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Graph, Tensor
from safeplan.nn.params import ParamSet, gru_cell, init_gru, init_mlp, mlp_forward


@dataclass(frozen=True)
class WorldModelConfig:
    obs_dim: int = 8
    act_dim: int = 2
    deter: int = 64
    stoch: int = 16
    hidden: int = 128
    embed: int = 64
    std_floor: float = 0.1
    alpha_r: float = 1.0
    alpha_c: float = 10.0
    beta_kl: float = 1.0
    kl_balance: float = 0.8
    free_nats: float = 1.0
    lr: float = 3e-4
    grad_clip: float = 100.0

    @property
    def feat_dim(self):
        return self.deter + self.stoch


@dataclass
class LatentState:
    h: Tensor
    z: Tensor
    dist: DiagGaussian

    @property
    def feat(self) -> Tensor:
        return ad.concat([self.h, self.z], -1)

    def detach(self) -> "LatentState":
        return LatentState(ad.stop_gradient(self.h), ad.stop_gradient(self.z), self.dist.detach())

    def __getitem__(self, idx) -> "LatentState":
        return LatentState(Tensor(self.h.data[idx]), Tensor(self.z.data[idx]),
                           DiagGaussian(Tensor(self.dist.mean.data[idx]), Tensor(self.dist.std.data[idx])))


@dataclass
class SequenceBatch:
    """Time-major arrays, shape (T, B, ...). ``actions[t]`` led to ``obs[t]``."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    terminals: np.ndarray

    @property
    def shape(self):
        return self.rewards.shape


@dataclass
class LossBreakdown:
    recon: float
    reward: float
    cost: float
    discount: float
    kl: float
    total: float
    kl_raw: float = 0.0


@dataclass
class WorldLossResult:
    breakdown: LossBreakdown
    graph: Graph
    loss: Tensor
    posterior: LatentState  # all time steps stacked, shape (T, B, ...)
    terms: dict = field(default_factory=dict)


class WorldModel:
    PREFIX = "wm"

    def __init__(self, cfg: WorldModelConfig = WorldModelConfig(), rng=None, params: ParamSet | None = None):
        self.cfg = cfg
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ParamSet()
            p, c = self.PREFIX, cfg
            init_gru(params, f"{p}.gru", c.stoch + c.act_dim, c.deter, rng)
            init_mlp(params, f"{p}.enc", self.enc_sizes, rng)
            init_mlp(params, f"{p}.post", self.post_sizes, rng)
            init_mlp(params, f"{p}.prior", self.prior_sizes, rng)
            init_mlp(params, f"{p}.dec", self.dec_sizes, rng)
            init_mlp(params, f"{p}.reward", self.scalar_sizes, rng)
            init_mlp(params, f"{p}.cost", self.scalar_sizes, rng)
            init_mlp(params, f"{p}.discount", self.scalar_sizes, rng)
        self.params = params

    # layer shapes
    @property
    def enc_sizes(self):
        return [self.cfg.obs_dim, self.cfg.hidden, self.cfg.embed]

    @property
    def post_sizes(self):
        return [self.cfg.deter + self.cfg.embed, self.cfg.hidden, 2 * self.cfg.stoch]

    @property
    def prior_sizes(self):
        return [self.cfg.deter, self.cfg.hidden, 2 * self.cfg.stoch]

    @property
    def dec_sizes(self):
        return [self.cfg.feat_dim, self.cfg.hidden, self.cfg.obs_dim]

    @property
    def scalar_sizes(self):
        return [self.cfg.feat_dim, self.cfg.hidden, self.cfg.hidden, 1]

    def _p(self, params):
        return self.params if params is None else params

    def initial_state(self, batch_size: int) -> LatentState:
        c = self.cfg
        z = np.zeros((batch_size, c.stoch), ad.DTYPE)
        return LatentState(Tensor(np.zeros((batch_size, c.deter), ad.DTYPE)), Tensor(z),
                           DiagGaussian(Tensor(z.copy()), Tensor(np.full_like(z, c.std_floor))))

    # -- components --------------------------------------------------------
    def recurrent(self, prev: LatentState, action, params=None) -> Tensor:
        params = self._p(params)
        action = action if isinstance(action, Tensor) else Tensor(np.asarray(action, ad.DTYPE))
        if action.shape[-1] != self.cfg.act_dim:
            raise ShapeError(f"action width {action.shape[-1]} != {self.cfg.act_dim}")
        x = ad.concat([prev.z, action], -1)
        return gru_cell(params, f"{self.PREFIX}.gru", x, prev.h)

    def embed(self, obs, params=None) -> Tensor:
        obs = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, ad.DTYPE))
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ShapeError(f"observation width {obs.shape[-1]} != {self.cfg.obs_dim}")
        return mlp_forward(self._p(params), f"{self.PREFIX}.enc", obs, self.enc_sizes)

    def prior(self, h: Tensor, params=None) -> DiagGaussian:
        raw = mlp_forward(self._p(params), f"{self.PREFIX}.prior", h, self.prior_sizes)
        return DiagGaussian.from_raw(raw, self.cfg.std_floor)

    def posterior(self, h: Tensor, embed: Tensor, params=None) -> DiagGaussian:
        raw = mlp_forward(self._p(params), f"{self.PREFIX}.post", ad.concat([h, embed], -1), self.post_sizes)
        return DiagGaussian.from_raw(raw, self.cfg.std_floor)

    def observe_step(self, prev: LatentState, action, obs, rng, params=None, embed=None):
        """One filtering step. Returns (posterior state, prior distribution)."""
        h = self.recurrent(prev, action, params)
        prior = self.prior(h, params)
        e = embed if embed is not None else self.embed(obs, params)
        post = self.posterior(h, e, params)
        return LatentState(h, post.sample(rng), post), prior

    def imagine_step(self, prev: LatentState, action, rng=None, params=None, use_mean=False) -> LatentState:
        """One observation-free step; z comes from the transition prior."""
        h = self.recurrent(prev, action, params)
        prior = self.prior(h, params)
        z = prior.mean if use_mean else prior.sample(rng)
        return LatentState(h, z, prior)

    def head(self, name: str, feat: Tensor, params=None) -> Tensor:
        sizes = self.dec_sizes if name == "dec" else self.scalar_sizes
        out = mlp_forward(self._p(params), f"{self.PREFIX}.{name}", feat, sizes)
        return out if name == "dec" else out[..., 0]

    def predict_heads(self, state: LatentState, params=None):
        """Means of the decoder, reward and cost heads and the continuation probability."""
        feat = state.feat
        return (self.head("dec", feat, params), self.head("reward", feat, params),
                self.head("cost", feat, params), ad.sigmoid(self.head("discount", feat, params)))

    # -- training ----------------------------------------------------------
    def kl_terms(self, post: DiagGaussian, prior: DiagGaussian):
        """(prior-side, posterior-side) KL means, each with its own stop-gradient."""
        prior_side = diag_gaussian_kl_elem(post.detach(), prior).mean()
        post_side = diag_gaussian_kl_elem(post, prior.detach()).mean()
        return prior_side, post_side

    def world_loss(self, batch: SequenceBatch, rng, params=None) -> WorldLossResult:
        """Unroll the filter over ``batch`` and build the composite loss on a fresh tape."""
        c = self.cfg
        T, B = batch.shape
        if T < 2:
            raise ValueError("world_loss needs sequences of length >= 2")
        graph = Graph()
        with graph:
            embeds = self.embed(batch.obs.astype(ad.DTYPE), params)
            state = self.initial_state(B)
            hs, zs, means, stds = [], [], [], []
            for t in range(T):
                h = self.recurrent(state, batch.actions[t].astype(ad.DTYPE), params)
                post = self.posterior(h, embeds[t], params)
                state = LatentState(h, post.sample(rng), post)
                hs.append(h)
                zs.append(state.z)
                means.append(post.mean)
                stds.append(post.std)
            h_all, z_all = ad.stack(hs), ad.stack(zs)
            post_all = DiagGaussian(ad.stack(means), ad.stack(stds))
            prior_all = self.prior(h_all, params)
            feat = ad.concat([h_all, z_all], -1)

            recon = -gaussian_log_prob(batch.obs, self.head("dec", feat, params), include_const=False).sum(-1).mean()
            reward = -gaussian_log_prob(batch.rewards, self.head("reward", feat, params), include_const=False).mean()
            cost = -gaussian_log_prob(batch.costs, self.head("cost", feat, params), include_const=False).mean()
            cont = 1.0 - batch.terminals
            discount = -bernoulli_log_prob(self.head("discount", feat, params), cont).mean()
            prior_side, post_side = self.kl_terms(post_all, prior_all)
            kl = c.kl_balance * ad.maximum(prior_side, c.free_nats) \
                + (1.0 - c.kl_balance) * ad.maximum(post_side, c.free_nats)
            total = recon + c.alpha_r * reward + c.alpha_c * cost + discount + c.beta_kl * kl
        terms = {"recon": recon, "reward": reward, "cost": cost, "discount": discount, "kl": kl}
        for name, t in terms.items():
            if not np.isfinite(t.data):
                raise NumericError(f"world-model loss term '{name}' is not finite", op=name)
        breakdown = LossBreakdown(
            recon=float(recon.data), reward=float(reward.data), cost=float(cost.data),
            discount=float(discount.data), kl=float(kl.data), total=float(total.data),
            kl_raw=float(prior_side.data),
        )
        terms["prior_side"] = prior_side
        terms["post_side"] = post_side
        posterior = LatentState(h_all, z_all, post_all)
        return WorldLossResult(breakdown, graph, total, posterior, terms)


def loss_total(b: LossBreakdown, cfg: WorldModelConfig) -> float:
    return b.recon + cfg.alpha_r * b.reward + cfg.alpha_c * b.cost + b.discount + cfg.beta_kl * b.kl

