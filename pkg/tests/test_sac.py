import numpy as np
import pytest
from scipy import integrate

from dovmeta.numerics import ShapeError
from dovmeta.sac import (Actor, Batch, CriticPair, SacHyper, act, actor_loss, bellman_targets, critic_loss,
                         soft_update, squashed_log_prob)
from conftest import central_diff, rel_error

OBS, ACT, EMB = 3, 2, 4


def nets(rng):
    actor = Actor(OBS, ACT, EMB, (8, 8), rng)
    critics = CriticPair(OBS, ACT, EMB, (8, 8), rng)
    for net in [actor.net, *critics.q, *critics.target]:
        for b in net.params[1::2]:
            b[...] = 0.1 * rng.standard_normal(b.shape)
    return actor, critics


def batch(rng, n=6):
    return Batch(rng.standard_normal((n, OBS)), np.tanh(rng.standard_normal((n, ACT))), rng.standard_normal(n),
                 rng.standard_normal((n, OBS)), (rng.random(n) < 0.3).astype(float))


def test_act_bounds_and_determinism(rng):
    actor, _ = nets(rng)
    for p in actor.net.params[::2]:
        p *= 30.0
    s, z = rng.standard_normal((50, OBS)), rng.standard_normal((50, EMB))
    a = act(actor, s, z)
    assert a.shape == (50, ACT) and np.all(np.abs(a) <= 1)
    assert np.array_equal(a, act(actor, s, z))
    single = act(actor, s[0], z[0])
    assert single.shape == (ACT,) and np.array_equal(single, a[0])
    noisy = act(actor, s, z, deterministic=False, rng=np.random.default_rng(0))
    assert np.all(np.abs(noisy) <= 1)


def test_zero_network_gives_zero_action(rng):
    actor, _ = nets(rng)
    for p in actor.net.params:
        p[...] = 0.0
    assert np.array_equal(act(actor, np.ones(OBS), np.ones(EMB)), np.zeros(ACT))


def test_act_shape_error(rng):
    actor, _ = nets(rng)
    with pytest.raises(ShapeError):
        act(actor, np.zeros(OBS + 1), np.zeros(EMB))


@pytest.mark.parametrize("mean,log_std", [(0.0, 0.0), (0.7, -0.5), (-1.5, 0.3)])
def test_tanh_log_prob_integrates_to_one(mean, log_std):
    f = lambda a: np.exp(squashed_log_prob(np.array([mean]), np.array([log_std]), np.array([a])))
    total, _ = integrate.quad(f, -1 + 1e-12, 1 - 1e-12, limit=400, points=[np.tanh(mean)])
    assert abs(total - 1.0) < 1e-3


def test_sample_log_prob_matches_density(rng):
    actor, _ = nets(rng)
    s, z, noise = rng.standard_normal((5, OBS)), rng.standard_normal((5, EMB)), rng.standard_normal((5, ACT))
    a, logp, _ = actor.sample(s, z, noise)
    mean, log_std, _, _ = actor.dist(s, z)
    assert np.allclose(logp, squashed_log_prob(mean, log_std, a), atol=1e-8)


def test_bellman_target_terminal(rng):
    actor, critics = nets(rng)
    hyper = SacHyper(reward_scale=2.0)
    b = batch(rng)
    b.terminals[:] = 1.0
    y = bellman_targets(critics, actor, b, rng.standard_normal((6, EMB)), hyper, rng.standard_normal((6, ACT)))
    assert np.allclose(y, 2.0 * b.rewards, atol=0)


def test_critic_loss_finite_differences(rng):
    actor, critics = nets(rng)
    hyper = SacHyper()
    b = batch(rng)
    z, z_tgt = rng.standard_normal((6, EMB)), rng.standard_normal((6, EMB))
    noise = rng.standard_normal((6, ACT))
    loss, grads, d_z, info = critic_loss(critics, actor, b, z, z_tgt, hyper, noise)
    y = info["targets"]

    def f():
        return critic_loss(critics, actor, b, z, z_tgt, hyper, noise, targets=y)[0]

    assert rel_error(grads, central_diff(f, critics.params())) < 1e-4
    assert rel_error([d_z], central_diff(f, [z])) < 1e-4


def test_critic_target_side_is_detached(rng):
    actor, critics = nets(rng)
    hyper = SacHyper()
    b = batch(rng)
    z = rng.standard_normal((6, EMB))
    noise = rng.standard_normal((6, ACT))
    _, _, d1, _ = critic_loss(critics, actor, b, z, z, hyper, noise)
    y = bellman_targets(critics, actor, b, z, hyper, noise)
    _, _, d2, _ = critic_loss(critics, actor, b, z, z, hyper, noise, targets=y)
    # d_z covers only the online side: identical whether the backup is pinned or not
    assert np.array_equal(d1, d2)


def test_actor_loss_finite_differences(rng):
    actor, critics = nets(rng)
    hyper = SacHyper()
    b = batch(rng, 8)
    z = rng.standard_normal((8, EMB))
    noise = rng.standard_normal((8, ACT))
    _, grads, _ = actor_loss(actor, critics, b, z, hyper, noise)
    f = lambda: actor_loss(actor, critics, b, z, hyper, noise)[0]
    assert rel_error(grads, central_diff(f, actor.net.params)) < 1e-4


def test_actor_loss_leaves_critics_alone(rng):
    actor, critics = nets(rng)
    before = [p.copy() for p in critics.params()]
    actor_loss(actor, critics, batch(rng), rng.standard_normal((6, EMB)), SacHyper(), rng.standard_normal((6, ACT)))
    assert all(np.array_equal(a, b) for a, b in zip(before, critics.params()))


def test_soft_update_examples(rng):
    _, critics = nets(rng)
    for p in critics.params():
        p[...] = 1.0
    for net in critics.target:
        for p in net.params:
            p[...] = 0.0
    soft_update(critics, 0.25)
    assert all(np.allclose(p, 0.25, atol=1e-15) for n in critics.target for p in n.params)
    soft_update(critics, 1.0)
    assert all(np.array_equal(p, np.ones_like(p)) for n in critics.target for p in n.params)


def test_hyper_validation():
    with pytest.raises(ValueError):
        SacHyper(gamma=1.0)
    with pytest.raises(ValueError):
        SacHyper(soft_update_rate=0.0)
    with pytest.raises(ValueError):
        SacHyper(batch_size=0)
