"""Control-vs-safe action classifier.

D(s, a) is trained to output 1 for actions drawn from the control actor and 0
for actions from the safe actor. Its log-output, evaluated on safe-actor
actions, is what pulls the safe actor toward control-like behaviour.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Tensor
from safeplan.nn.params import ParamSet, init_mlp, mlp_forward

PREFIX = "disc"
LOGIT_CLAMP = 10.0


@dataclass(frozen=True)
class DiscriminatorConfig:
    hidden: int = 128
    layers: int = 2
    lr: float = 1e-4
    grad_clip: float = 100.0


@dataclass
class DiscBatch:
    feats: np.ndarray
    control_actions: np.ndarray
    safe_actions: np.ndarray


class Discriminator:
    def __init__(self, feat_dim: int, act_dim: int, cfg: DiscriminatorConfig = DiscriminatorConfig(), rng=None,
                 params: ParamSet | None = None):
        self.cfg = cfg
        self.sizes = [feat_dim + act_dim] + [cfg.hidden] * cfg.layers + [1]
        if params is None:
            params = ParamSet()
            # zero output layer: an untrained discriminator says 0.5 everywhere
            init_mlp(params, PREFIX, self.sizes, rng if rng is not None else np.random.default_rng(0), zero_last=True)
        self.params = params

    def logit(self, feats, actions, params=None) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, ad.DTYPE))
        actions = actions if isinstance(actions, Tensor) else Tensor(np.asarray(actions, ad.DTYPE))
        x = ad.concat([ad.stop_gradient(feats), actions], -1)
        return mlp_forward(self.params if params is None else params, PREFIX, x, self.sizes)[..., 0]

    def score(self, feats, actions, params=None) -> tuple[Tensor, Tensor]:
        """(probability the action came from the control actor, its log)."""
        logit = self.logit(feats, actions, params)
        return ad.sigmoid(logit), ad.log_sigmoid(logit)

    def train_loss(self, batch: DiscBatch, params=None) -> Tensor:
        """Two-class cross-entropy; states and actions enter detached."""
        lc = self.logit(batch.feats, ad.stop_gradient(Tensor(np.asarray(batch.control_actions, ad.DTYPE))), params)
        ls = self.logit(batch.feats, ad.stop_gradient(Tensor(np.asarray(batch.safe_actions, ad.DTYPE))), params)
        return -ad.log_sigmoid(lc).mean() - ad.log_sigmoid(-ls).mean()

    def clone_signal(self, feats: Tensor, actions: Tensor, frozen_params=None) -> Tensor:
        """log D(s, a) for safe-actor actions with the discriminator frozen.

        Logits are clamped to +-10 in value; the gradient passes straight
        through the clamp so a confident discriminator still steers the actor.
        """
        params = self.params.frozen() if frozen_params is None else frozen_params
        logit = self.logit(feats, actions, params)
        return ad.log_sigmoid(ad.clip_st(logit, -LOGIT_CLAMP, LOGIT_CLAMP))

    def accuracy(self, batch: DiscBatch) -> float:
        pc = self.score(batch.feats, batch.control_actions)[0].data
        ps = self.score(batch.feats, batch.safe_actions)[0].data
        return float((np.sum(pc > 0.5) + np.sum(ps < 0.5)) / (pc.size + ps.size))
