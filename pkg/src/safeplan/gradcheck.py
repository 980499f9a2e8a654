"""Finite-difference checks of every backward rule and trainable module.

Each check builds a scalar loss twice: once on the tape to get the analytic
gradient, and repeatedly without a tape to get central differences. Both run
in float64. Sampled noise, stop-gradient outputs and the branch taken by
piecewise ops (clip, maximum) are recorded on the taped pass and replayed on
the perturbed passes (see :class:`autodiff.Replay`), so the oracle
differentiates the same smooth piece the tape does. Kinks are still avoided
in the op-level inputs so the unreplayed ops are exercised honestly too.

Two directional derivatives are compared per instance:

* along the normalised analytic gradient ``d = g / |g|``. The error is
  ``|g.d - fd| / max(|g.d|, |fd|)``.
* along a random unit direction. The error is ``|g.d - fd| / |g|``, so the
  scale is the gradient norm and a near-zero projection does not blow it up.

An instance passes when both errors are below ``tol``.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from safeplan import distributions as dist
from safeplan.discriminator import DiscBatch, Discriminator, DiscriminatorConfig
from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Graph, Tensor
from safeplan.nn.params import ParamSet, gru_cell, init_gru, init_mlp, mlp_forward
from safeplan.policy import (Actor, Critic, PolicyConfig, control_actor_loss, critic_loss, lambda_targets,
                             rollout, safe_actor_loss)
from safeplan.world_model import LatentState, SequenceBatch, WorldModel, WorldModelConfig

STEP = 1e-3
TOL = 1e-3
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    instances: int
    failures: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.instances > 0

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.name:<22} n={self.instances:<4} fail={self.failures:<3} "
                f"max_rel_err={self.max_rel_err:.2e} ({self.seconds:.1f}s)")


def directional_errors(build: Callable[[dict], Tensor], values: dict[str, np.ndarray],
                       rng: np.random.Generator, step: float = STEP) -> tuple[float, float]:
    """Return (gradient-direction error, random-direction error) for one instance.

    ``build`` maps a name -> Tensor dict to a scalar loss, or to a
    (loss, graph) pair when it records onto its own tape. It must be
    deterministic apart from noise drawn through the distributions module.
    """
    values = {k: np.asarray(v, F64) for k, v in values.items()}
    replay = ad.Replay()
    graph = Graph()
    with replay:
        tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in values.items()}
        with graph:
            out = build(tensors)
    loss, tape = out if isinstance(out, tuple) else (out, graph)
    g = ad.grad(loss, tape, tensors)
    flat_g = np.concatenate([g[k].ravel() for k in values])
    gnorm = float(np.linalg.norm(flat_g))

    def f(direction: np.ndarray, eps: float) -> float:
        shifted, i = {}, 0
        for k, v in values.items():
            shifted[k] = Tensor(v + eps * direction[i:i + v.size].reshape(v.shape))
            i += v.size
        with replay.replay():
            out = build(shifted)
        return float((out[0] if isinstance(out, tuple) else out).data)

    def fd(direction):
        return (f(direction, step) - f(direction, -step)) / (2.0 * step)

    if gnorm == 0.0:
        # A zero analytic gradient must agree with a flat function.
        d = rng.standard_normal(flat_g.size)
        d /= np.linalg.norm(d)
        n = abs(fd(d))
        return n, n
    d_g = flat_g / gnorm
    num = fd(d_g)
    err_g = abs(gnorm - num) / max(gnorm, abs(num))
    d_r = rng.standard_normal(flat_g.size)
    d_r /= np.linalg.norm(d_r)
    err_r = abs(float(flat_g @ d_r) - fd(d_r)) / gnorm
    return err_g, err_r


def run_check(name: str, make_instance, n: int, seed: int, tol: float = TOL) -> CheckResult:
    """``make_instance(rng)`` returns (build, values)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for _ in range(n):
        build, values = make_instance(rng)
        err = max(directional_errors(build, values, rng))
        worst = max(worst, err)
        failures += int(not err < tol)
    return CheckResult(name, n, failures, worst, time.perf_counter() - t0)


# -- elementwise and structural ops -----------------------------------------

def _away_from(x, points, gap=0.05):
    """Nudge entries of ``x`` that sit within ``gap`` of a kink."""
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.sign(x - p + 1e-12) * gap, x)
    return x


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def _unary(op, low=-2.0, high=2.0, kinks=()):
    def make(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
        x = _away_from(rng.uniform(low, high, size=shape), kinks)
        w = rng.standard_normal(shape)
        return (lambda p: _weighted(op(p["x"]), w)), {"x": x}
    return make


def _binary(op, positive_b=False):
    def make(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        b_shape = shape if rng.random() < 0.5 else shape[1:]  # exercise broadcasting
        a = rng.standard_normal(shape)
        b = rng.standard_normal(b_shape)
        if positive_b:
            b = np.abs(b) + 0.5
        w = rng.standard_normal(shape)
        return (lambda p: _weighted(op(p["a"], p["b"]), w)), {"a": a, "b": b}
    return make


def _matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    lead = (int(rng.integers(1, 3)),) if rng.random() < 0.5 else ()
    a, b = rng.standard_normal(lead + (n, k)), rng.standard_normal((k, m))
    w = rng.standard_normal(lead + (n, m))
    return (lambda p: _weighted(ad.matmul(p["a"], p["b"]), w)), {"a": a, "b": b}


def _reduce(kind):
    def make(rng):
        x = rng.standard_normal((3, 4, 2))
        axis = [None, 0, 1, -1][int(rng.integers(0, 4))]
        keep = bool(rng.random() < 0.5)
        fn = ad.sum_ if kind == "sum" else ad.mean
        w = rng.standard_normal(np.sum(x, axis=axis, keepdims=keep).shape)
        return (lambda p: _weighted(fn(p["x"], axis=axis, keepdims=keep), w)), {"x": x}
    return make


def _shape_ops(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    which = int(rng.integers(0, 5))
    if which == 0:
        axis = int(rng.integers(0, 2))
        op = lambda p: ad.concat([p["a"], p["b"]], axis)  # noqa: E731
    elif which == 1:
        op = lambda p: ad.stack([p["a"], p["b"]], 1)  # noqa: E731
    elif which == 2:
        op = lambda p: ad.reshape(p["a"], (3, 2)) * ad.reshape(p["b"], (3, 2))  # noqa: E731
    elif which == 3:
        idx = (slice(None), np.array([2, 0, 2]))  # repeated index accumulates
        op = lambda p: ad.getitem(p["a"], idx) + ad.getitem(p["b"], (1,))  # noqa: E731
    else:
        op = lambda p: ad.concat(list(reversed(ad.split(p["a"] * p["b"], 3, -1))), -1)  # noqa: E731
    probe = op({"a": Tensor(a), "b": Tensor(b)})
    w = rng.standard_normal(probe.shape)
    return (lambda p: _weighted(op(p), w)), {"a": a, "b": b}


OP_CHECKS = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "neg": _unary(ad.neg),
    "square": _unary(ad.square),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, 0.1, 3.0),
    "sqrt": _unary(ad.sqrt, 0.1, 3.0),
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid, -6, 6),
    "softplus": _unary(ad.softplus, -6, 6),
    "log_sigmoid": _unary(ad.log_sigmoid, -6, 6),
    "elu": _unary(ad.elu, kinks=(0.0,)),
    "normal_cdf": _unary(ad.normal_cdf, -3, 3),
    "maximum": _unary(lambda a: ad.maximum(a, 0.3), kinks=(0.3,)),
    "clip": _unary(lambda a: ad.clip(a, -0.5, 0.7), kinks=(-0.5, 0.7)),
    "matmul": _matmul,
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "shape_ops": _shape_ops,
}


# -- network building blocks -------------------------------------------------

def _mlp(rng):
    sizes = [int(v) for v in rng.integers(1, 6, size=int(rng.integers(2, 5)))]
    ps = ParamSet()
    init_mlp(ps, "m", sizes, rng)
    x = rng.standard_normal((int(rng.integers(1, 4)), sizes[0]))
    w = rng.standard_normal((x.shape[0], sizes[-1]))
    values = ps.values()
    values["x"] = x
    return (lambda p: _weighted(mlp_forward(p, "m", p["x"], sizes), w)), values


def _gru(rng):
    n_in, n_h, b = (int(v) for v in rng.integers(1, 5, size=3))
    ps = ParamSet()
    init_gru(ps, "g", n_in, n_h, rng)
    values = ps.values()
    values["g.b_gates"] = rng.normal(0, 0.5, size=2 * n_h)
    values["x"], values["h"] = rng.standard_normal((b, n_in)), rng.standard_normal((b, n_h))
    w = rng.standard_normal((b, n_h))

    def build(p):
        h = gru_cell(p, "g", p["x"], p["h"])
        return _weighted(gru_cell(p, "g", p["x"], h), w)  # two steps: recurrence path
    return build, values


# -- distributions ----------------------------------------------------------

def _trunc_normal(rng):
    b, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    raw = rng.normal(0, 1.0, size=(b, 2 * k))
    action = rng.uniform(-0.95, 0.95, size=(b, k))
    wl, we, ws = rng.standard_normal(3)
    seed = int(rng.integers(1 << 31))

    def build(p):
        d = dist.TruncNormal.from_raw(p["raw"])
        sample = d.sample(np.random.default_rng(seed))
        return wl * d.log_prob(action).sum() + we * d.entropy().sum() + ws * ad.square(sample).sum()
    return build, {"raw": raw}


def _diag_gaussian(rng):
    b, k = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    values = {"q": rng.normal(0, 1, (b, 2 * k)), "p": rng.normal(0, 1, (b, 2 * k))}
    x = rng.standard_normal((b, k))
    seed = int(rng.integers(1 << 31))

    def build(p):
        q, pr = dist.DiagGaussian.from_raw(p["q"]), dist.DiagGaussian.from_raw(p["p"])
        s = q.sample(np.random.default_rng(seed))
        return dist.diag_gaussian_kl(q, pr) + pr.log_prob(x).mean() + 0.3 * pr.log_prob(s).sum()
    return build, values


def _scalar_likelihoods(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    target_b = (rng.random(shape) < 0.5).astype(F64)
    target_g = rng.standard_normal(shape)

    def build(p):
        return dist.bernoulli_log_prob(p["logit"], target_b).sum() \
            + dist.gaussian_log_prob(target_g, p["mean"]).sum()
    return build, {"logit": rng.normal(0, 3, shape), "mean": rng.standard_normal(shape)}


# -- trainable modules -------------------------------------------------------

MICRO_WM = WorldModelConfig(obs_dim=3, act_dim=2, deter=4, stoch=2, hidden=6, embed=5)
MICRO_POLICY = PolicyConfig(horizon=3, hidden=6, layers=2)


def _perturbed(ps: ParamSet, rng, scale=0.3) -> dict[str, np.ndarray]:
    """Parameter values with non-zero biases so no unit sits at a trivial point."""
    return {k: v + (scale * rng.standard_normal(v.shape) if k.endswith(".b") or "b_" in k else 0.0)
            for k, v in ps.values().items()}


def _micro_batch(rng, T=3, B=2, cfg=MICRO_WM) -> SequenceBatch:
    return SequenceBatch(
        obs=rng.standard_normal((T, B, cfg.obs_dim)).astype(np.float32),
        actions=rng.uniform(-1, 1, (T, B, cfg.act_dim)).astype(np.float32),
        rewards=rng.standard_normal((T, B)).astype(np.float32),
        costs=(rng.random((T, B)) < 0.3).astype(np.float32),
        terminals=(rng.random((T, B)) < 0.2).astype(np.float32),
    )


def _world_loss(rng):
    free = float(rng.choice([0.0, MICRO_WM.free_nats]))
    cfg = dataclasses.replace(MICRO_WM, free_nats=free)
    wm = WorldModel(cfg, rng)
    batch = _micro_batch(rng, cfg=cfg)
    seed = int(rng.integers(1 << 31))
    def build(p):
        res = wm.world_loss(batch, np.random.default_rng(seed), p)
        return res.loss, res.graph
    return build, _perturbed(wm.params, rng)


def _start_state(wm: WorldModel, rng, n=2) -> LatentState:
    cfg = wm.cfg
    z = rng.standard_normal((n, cfg.stoch))
    return LatentState(Tensor(rng.standard_normal((n, cfg.deter))), Tensor(z),
                       dist.DiagGaussian(Tensor(z), Tensor(np.ones_like(z))))


def _frozen64(values: dict) -> dict:
    return {k: Tensor(np.asarray(v, F64)) for k, v in values.items()}


def _control_actor(rng):
    wm = WorldModel(MICRO_WM, rng)
    actor = Actor("actor_c", MICRO_WM.feat_dim, MICRO_WM.act_dim, MICRO_POLICY, rng)
    critic = Critic("critic_r", MICRO_WM.feat_dim, MICRO_POLICY, rng)
    wm_p, critic_p = _frozen64(_perturbed(wm.params, rng)), _frozen64(_perturbed(critic.params, rng))
    start = _start_state(wm, rng)
    seed = int(rng.integers(1 << 31))

    def build(p):
        traj = rollout(actor, wm, start, MICRO_POLICY.horizon, np.random.default_rng(seed), wm_p, p,
                       critics={"reward": (critic, critic_p)}, heads=("reward",))
        targets = lambda_targets(traj.rewards, traj.discounts, traj.reward_values, MICRO_POLICY.lam)
        return control_actor_loss(traj, targets, MICRO_POLICY.eta)
    return build, _perturbed(actor.params, rng)


def _safe_actor(rng):
    wm = WorldModel(MICRO_WM, rng)
    actor = Actor("actor_s", MICRO_WM.feat_dim, MICRO_WM.act_dim, MICRO_POLICY, rng)
    critic = Critic("critic_c", MICRO_WM.feat_dim, MICRO_POLICY, rng)
    disc = Discriminator(MICRO_WM.feat_dim, MICRO_WM.act_dim, DiscriminatorConfig(hidden=6), rng)
    disc_values = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in disc.params.values().items()}
    wm_p, critic_p = _frozen64(_perturbed(wm.params, rng)), _frozen64(_perturbed(critic.params, rng))
    disc_p = _frozen64(disc_values)
    start = _start_state(wm, rng)
    lam_p = float(rng.uniform(0.1, 5.0))
    seed = int(rng.integers(1 << 31))

    def build(p):
        traj = rollout(actor, wm, start, MICRO_POLICY.horizon, np.random.default_rng(seed), wm_p, p,
                       critics={"cost": (critic, critic_p)}, heads=("cost",))
        targets = lambda_targets(traj.costs, traj.discounts, traj.cost_values, MICRO_POLICY.lam)
        scores = disc.clone_signal(traj.feats[:-1], traj.actions, disc_p)
        return safe_actor_loss(traj, targets, lam_p, scores, MICRO_POLICY.eta)
    return build, _perturbed(actor.params, rng)


def _critic(rng):
    critic = Critic("critic_r", MICRO_WM.feat_dim, MICRO_POLICY, rng)
    H, N = MICRO_POLICY.horizon, 3
    feats = Tensor(rng.standard_normal((H + 1, N, MICRO_WM.feat_dim)))
    targets = lambda_targets(rng.standard_normal((H, N)), rng.uniform(0.5, 1, (H, N)),
                             rng.standard_normal((H + 1, N)), MICRO_POLICY.lam)
    targets = dataclasses.replace(targets, values=Tensor(targets.values.data))
    return (lambda p: critic_loss(critic, feats[:-1], targets, p)), _perturbed(critic.params, rng)


def _discriminator(rng):
    disc = Discriminator(MICRO_WM.feat_dim, MICRO_WM.act_dim, DiscriminatorConfig(hidden=6), rng)
    values = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in disc.params.values().items()}
    n = 4
    batch = DiscBatch(rng.standard_normal((n, MICRO_WM.feat_dim)), rng.uniform(-1, 1, (n, MICRO_WM.act_dim)),
                      rng.uniform(-1, 1, (n, MICRO_WM.act_dim)))
    return (lambda p: disc.train_loss(batch, p)), values


MODULE_CHECKS = {
    "mlp": _mlp,
    "gru": _gru,
    "trunc_normal": _trunc_normal,
    "diag_gaussian": _diag_gaussian,
    "bernoulli_gaussian": _scalar_likelihoods,
    "world_loss": _world_loss,
    "control_actor_loss": _control_actor,
    "safe_actor_loss": _safe_actor,
    "critic_loss": _critic,
    "disc_loss": _discriminator,
}


def run_all(instances: int = 100, seed: int = 0, verbose: bool = False, only=None) -> list[CheckResult]:
    """Run every check with ``instances`` random instances each."""
    checks = {**{f"op:{k}": v for k, v in OP_CHECKS.items()}, **MODULE_CHECKS}
    results = []
    for i, (name, make) in enumerate(checks.items()):
        if only is not None and name not in only:
            continue
        res = run_check(name, make, instances, seed + 7919 * i)
        if verbose:
            print(res.line(), flush=True)
        results.append(res)
    return results
