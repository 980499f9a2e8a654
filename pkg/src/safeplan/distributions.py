"""Probability heads: truncated normal actions, diagonal Gaussian latents,
Bernoulli logits and unit-variance Gaussian regression targets.

All density functions take and return autodiff tensors so they can sit inside
a loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Tensor

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
STD_FLOOR = 0.1
MAX_REJECTION_TRIES = 100


def _noise(fresh):
    return ad.replayed("noise", fresh)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


@dataclass
class TruncNormal:
    """Normal(mean, std) restricted to [low, high] in every action dimension."""

    mean: Tensor
    std: Tensor
    low: float = -1.0
    high: float = 1.0
    _cache: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @classmethod
    def from_raw(cls, raw: Tensor, std_floor: float = STD_FLOOR) -> "TruncNormal":
        m, s = ad.split(raw, 2, -1)
        return cls(ad.tanh(m), ad.softplus(s) + std_floor)

    def _stats(self):
        """(alpha, beta, log mass, log std), shared by log_prob and entropy.

        Cached per graph: values taped on one graph must not be reused as
        constants on another.
        """
        graph = ad.current_graph()
        if self._cache is None or self._cache[0] is not graph:
            alpha = (self.low - self.mean) / self.std
            beta = (self.high - self.mean) / self.std
            log_mass = ad.log(ad.normal_cdf(beta) - ad.normal_cdf(alpha))
            self._cache = (graph, (alpha, beta, log_mass, ad.log(self.std)))
        return self._cache[1]

    def sample(self, rng: np.random.Generator) -> Tensor:
        """Reparameterised draw.

        Noise is drawn by rejection so the sample lands in the support; the
        sample itself is ``mean + std * eps`` so gradients reach both
        parameters. Anything still outside after the retry budget is clipped
        with a straight-through gradient.
        """
        mu, sd = self.mean.data, self.std.data

        def fresh():
            eps = rng.standard_normal(mu.shape)
            pending = (mu + sd * eps < self.low) | (mu + sd * eps > self.high)
            for _ in range(MAX_REJECTION_TRIES):
                n = int(pending.sum())
                if not n:
                    break
                eps[pending] = rng.standard_normal(n)
                x = mu + sd * eps
                pending = (x < self.low) | (x > self.high)
            return eps

        eps = Tensor(_noise(fresh).astype(mu.dtype))
        return ad.clip_st(self.mean + self.std * eps, self.low, self.high)

    def mode(self) -> Tensor:
        return self.mean

    def log_prob(self, action) -> Tensor:
        """Log density summed over the last axis."""
        a = _as_tensor(action, self.mean)
        if np.any(a.data < self.low - 1e-6) or np.any(a.data > self.high + 1e-6):
            raise ValueError("action outside the truncated-normal support")
        _, _, log_mass, log_std = self._stats()
        z = (a - self.mean) / self.std
        logp = -0.5 * ad.square(z) - log_std - LOG_SQRT_2PI - log_mass
        return logp.sum(axis=-1)

    def entropy(self) -> Tensor:
        """Closed-form differential entropy summed over the last axis."""
        alpha, beta, log_mass, log_std = self._stats()
        # (alpha phi(alpha) - beta phi(beta)) / (2 Z), with phi(x) / Z = exp(-x^2 / 2 - log Z) / sqrt(2 pi)
        w_a = ad.exp(-0.5 * ad.square(alpha) - log_mass)
        w_b = ad.exp(-0.5 * ad.square(beta) - log_mass)
        ent = (LOG_SQRT_2PI + 0.5) + log_std + log_mass \
            + (alpha * w_a - beta * w_b) * (0.5 / math.sqrt(2.0 * math.pi))
        return ent.sum(axis=-1)

    def analytic_mean(self) -> np.ndarray:
        from scipy import special

        a = (self.low - self.mean.data) / self.std.data
        b = (self.high - self.mean.data) / self.std.data
        pdf = lambda x: np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)  # noqa: E731
        mass = special.ndtr(b) - special.ndtr(a)
        return self.mean.data + self.std.data * (pdf(a) - pdf(b)) / mass


@dataclass
class DiagGaussian:
    mean: Tensor
    std: Tensor

    @classmethod
    def from_raw(cls, raw: Tensor, std_floor: float = STD_FLOOR) -> "DiagGaussian":
        m, s = ad.split(raw, 2, -1)
        return cls(m, ad.softplus(s) + std_floor)

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = _noise(lambda: rng.standard_normal(self.mean.shape))
        return self.mean + self.std * Tensor(eps.astype(self.mean.data.dtype))

    def log_prob(self, x) -> Tensor:
        x = _as_tensor(x, self.mean)
        z = (x - self.mean) / self.std
        return (-0.5 * ad.square(z) - ad.log(self.std) - LOG_SQRT_2PI).sum(axis=-1)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(ad.stop_gradient(self.mean), ad.stop_gradient(self.std))


def diag_gaussian_kl_elem(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL[q || p] summed over the last axis, one value per batch element."""
    var_ratio = ad.square(q.std / p.std)
    mean_term = ad.square((q.mean - p.mean) / p.std)
    return (0.5 * (var_ratio + mean_term - 1.0) - ad.log(q.std / p.std)).sum(axis=-1)


def diag_gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL[q || p] summed over latent dims and averaged over the batch."""
    return diag_gaussian_kl_elem(q, p).mean()


def bernoulli_log_prob(logit: Tensor, target) -> Tensor:
    """Elementwise log p(target | logit) via log-sigmoid, stable for large |logit|."""
    t = _as_tensor(target, logit)
    return t * ad.log_sigmoid(logit) + (1.0 - t) * ad.log_sigmoid(-logit)


def gaussian_log_prob(target, mean: Tensor, include_const=True) -> Tensor:
    """Elementwise unit-variance Gaussian log density of ``target`` under ``mean``."""
    t = _as_tensor(target, mean)
    out = -0.5 * ad.square(t - mean)
    return out - LOG_SQRT_2PI if include_const else out
