import math

import numpy as np
import pytest
from toys import ToyModel, biased_actor, separable_clusters, toy_start

from safeplan.discriminator import LOGIT_CLAMP, DiscBatch, Discriminator, DiscriminatorConfig
from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Graph, Tensor
from safeplan.nn.optim import opt_step
from safeplan.policy import PolicyConfig

CFG = DiscriminatorConfig(hidden=16)


def random_batch(rng, n=8, feat_dim=5):
    return DiscBatch(rng.normal(size=(n, feat_dim)).astype(np.float32),
                     rng.uniform(-1, 1, (n, 2)).astype(np.float32), rng.uniform(-1, 1, (n, 2)).astype(np.float32))


def test_untrained_discriminator_is_indifferent():
    disc = Discriminator(5, 2, CFG, np.random.default_rng(0))
    b = random_batch(np.random.default_rng(1))
    p, logp = disc.score(b.feats, b.control_actions)
    assert np.all(p.data == 0.5) and np.allclose(logp.data, math.log(0.5))
    assert float(disc.train_loss(b).data) == pytest.approx(2 * math.log(2), rel=1e-6)


def test_score_monotone_in_logit():
    disc = Discriminator(5, 2, CFG, np.random.default_rng(0))
    last = f"disc.l{CFG.layers}.b"
    b = random_batch(np.random.default_rng(1))
    probs = []
    for bias in (-3.0, 0.0, 2.0, 7.0):
        disc.params.load_values({last: [bias]})
        p, logp = disc.score(b.feats, b.control_actions)
        np.testing.assert_allclose(logp.data, np.log(p.data.astype(np.float64)), atol=1e-6)
        probs.append(p.data)
    assert all(np.all(b > a) for a, b in zip(probs, probs[1:]))


def test_loss_permutation_invariant():
    rng = np.random.default_rng(2)
    disc = Discriminator(5, 2, CFG, rng)
    separable_step(disc, rng)
    b = random_batch(rng, n=16)
    perm = rng.permutation(16)
    shuffled = DiscBatch(b.feats[perm], b.control_actions[perm], b.safe_actions[perm])
    assert float(disc.train_loss(b).data) == pytest.approx(float(disc.train_loss(shuffled).data), rel=1e-6)


def separable_step(disc, rng, steps=20):
    for _ in range(steps):
        b = random_batch(rng)
        b.control_actions[:] = 0.8
        b.safe_actions[:] = -0.8
        g = Graph()
        with g:
            loss = disc.train_loss(b)
        opt_step(disc.params, ad.grad(loss, g, disc.params.params), 1e-2)


def test_perfect_separation_drives_loss_to_zero():
    rng = np.random.default_rng(3)
    disc = Discriminator(5, 2, CFG, rng)
    separable_step(disc, rng, steps=300)
    b = random_batch(rng)
    b.control_actions[:] = 0.8
    b.safe_actions[:] = -0.8
    assert 0.0 < float(disc.train_loss(b).data) < 1e-2


def test_train_loss_is_detached_from_inputs():
    disc = Discriminator(5, 2, CFG, np.random.default_rng(0))
    separable_step(disc, np.random.default_rng(1))
    feats = Tensor(np.random.default_rng(2).normal(size=(4, 5)).astype(np.float32), requires_grad=True)
    acts = Tensor(np.full((4, 2), 0.3, np.float32), requires_grad=True)
    g = Graph()
    with g:
        logit = disc.logit(feats, ad.stop_gradient(acts))
        loss = -ad.log_sigmoid(logit).mean()
    grads = ad.grad(loss, g, {"f": feats, "a": acts})
    assert np.all(grads["f"] == 0) and np.all(grads["a"] == 0)


def test_clone_signal_is_frozen_and_reaches_actions():
    disc = Discriminator(5, 2, CFG, np.random.default_rng(0))
    separable_step(disc, np.random.default_rng(1))
    acts = Tensor(np.full((4, 2), -0.5, np.float32), requires_grad=True)
    feats = np.random.default_rng(2).normal(size=(4, 5)).astype(np.float32)
    g = Graph()
    with g:
        sig = disc.clone_signal(feats, acts).mean()
    grads = ad.grad(sig, g, {"a": acts, **disc.params.params})
    assert all(np.all(v == 0) for k, v in grads.items() if k.startswith("disc"))
    # the trained classifier favours +0.8, so the signal rises as actions move up
    assert np.all(grads["a"] > 0)


def test_clone_signal_near_zero_on_control_like_actions():
    disc = Discriminator(5, 2, CFG, np.random.default_rng(0))
    separable_step(disc, np.random.default_rng(1), steps=300)
    feats = np.random.default_rng(2).normal(size=(10, 5)).astype(np.float32)
    sig = disc.clone_signal(feats, np.full((10, 2), 0.8, np.float32)).data
    assert np.all(sig <= 0) and np.all(sig > -0.05)


def test_clone_signal_clamp_is_straight_through():
    disc = Discriminator(5, 2, CFG, np.random.default_rng(0))
    w = np.random.default_rng(3).normal(size=(CFG.hidden, 1)) * 0.1
    disc.params.load_values({f"disc.l{CFG.layers}.b": [-40.0], f"disc.l{CFG.layers}.w": w})
    acts = Tensor(np.zeros((3, 2), np.float32), requires_grad=True)
    feats = np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32)
    g = Graph()
    with g:
        sig = disc.clone_signal(feats, acts)
        total = sig.sum()
    np.testing.assert_allclose(sig.data, math.log(1 / (1 + math.exp(LOGIT_CLAMP))), rtol=1e-5)
    # a raw logit of -40 would give log D ~ -40; the clamp bounds it but keeps a gradient
    grads = ad.grad(total, g, {"a": acts})
    assert np.any(grads["a"] != 0)


def test_accuracy_counts():
    disc = Discriminator(5, 2, CFG, np.random.default_rng(0))
    b = random_batch(np.random.default_rng(1), n=4)
    assert disc.accuracy(b) == 0.0  # 0.5 is neither > 0.5 nor < 0.5
    separable_step(disc, np.random.default_rng(2), steps=100)
    b.control_actions[:] = 0.8
    b.safe_actions[:] = -0.8
    assert disc.accuracy(b) == 1.0


def test_label_convention_after_training():
    trace, disc, held = separable_clusters(seed=5, updates=300, eval_every=300)
    pc = disc.score(held.feats, held.control_actions)[0].data
    ps = disc.score(held.feats, held.safe_actions)[0].data
    assert pc.mean() > 0.5 > ps.mean()
    assert trace[-1][1] > 0.95


def test_adversarial_direction_at_snapshots():
    # one safe-actor step on -log D (no cost, no entropy) raises D on the actor's new mean actions
    pc = PolicyConfig(horizon=3, hidden=32, eta=0.0)
    states = toy_start(64, np.random.default_rng(0))
    for snapshot in (50, 200, 600):
        _, disc, _ = separable_clusters(seed=1, updates=snapshot, eval_every=snapshot)
        actor = biased_actor("actor_s", -0.5, pc, snapshot)

        def mean_d():
            a = actor.dist(states.feat).mode()
            return float(disc.score(states.feat, a)[0].data.mean())

        before = mean_d()
        g = Graph()
        with g:
            a = actor.dist(states.feat).mode()
            loss = -disc.clone_signal(states.feat, a).mean()
        opt_step(actor.params, ad.grad(loss, g, actor.params.params), 1e-3)
        assert mean_d() > before, snapshot


def test_feature_width_mismatch_raises():
    disc = Discriminator(ToyModel.feat_dim, 2, CFG, np.random.default_rng(0))
    with pytest.raises(Exception):
        disc.logit(np.zeros((2, 7), np.float32), np.zeros((2, 2), np.float32))
