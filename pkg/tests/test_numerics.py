import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dovmeta.numerics import (Adam, DiagGaussian, DomainError, Mlp, ShapeError, clamp_log_var,
                              gaussian_sample, kl_diag, kl_terms, mlp_backward, mlp_forward)
from conftest import central_diff, rel_error


def naive_forward(params, x):
    # element-by-element recomputation, independent of the vectorized path
    h = list(x)
    n_layers = len(params) // 2
    for layer in range(n_layers):
        W, b = params[2 * layer], params[2 * layer + 1]
        out = []
        for k in range(W.shape[1]):
            s = b[k]
            for i in range(W.shape[0]):
                s += h[i] * W[i, k]
            if layer < n_layers - 1:
                s = s if s > 0 else 0.0
            out.append(s)
        h = out
    return np.array(h)


def test_identity_linear_layer():
    net = Mlp((2, 2))
    net.params[0][...] = np.eye(2)
    assert np.array_equal(mlp_forward(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_zero_weights_output_bias(rng):
    net = Mlp((3, 4, 2), rng)
    for p in net.params[::2]:
        p[...] = 0.0
    net.params[-1][...] = [0.3, -0.7]
    assert np.array_equal(mlp_forward(net, rng.standard_normal(3)), [0.3, -0.7])


def test_forward_matches_naive(rng):
    net = Mlp((4, 6, 5, 3), rng)
    for p in net.params[1::2]:
        p[...] = rng.standard_normal(p.shape)
    x = rng.standard_normal(4)
    assert np.max(np.abs(mlp_forward(net, x) - naive_forward(net.params, x))) <= 1e-12


def test_shape_errors(rng):
    net = Mlp((3, 2), rng)
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros(4))
    _, cache = net.forward(np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        net.backward(cache, np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        Mlp((3, 0, 2))


def test_constant_head_zero_grads(rng):
    net = Mlp((3, 4, 1), rng)
    grads, d_in = mlp_backward(net, rng.standard_normal(3), np.zeros(1))
    assert all(np.all(g == 0) for g in grads) and np.all(d_in == 0)


def test_linear_input_grad_exact(rng):
    net = Mlp((4, 3), rng)
    g_out = rng.standard_normal(3)
    _, d_in = mlp_backward(net, rng.standard_normal(4), g_out)
    assert np.array_equal(d_in, net.params[0] @ g_out)


@pytest.mark.parametrize("point", range(20))
def test_mlp_backward_finite_differences(point):
    r = np.random.default_rng(100 + point)
    net = Mlp((3, 5, 4, 1), r)
    for p in net.params[1::2]:
        p[...] = 0.1 * r.standard_normal(p.shape)
    x = r.standard_normal((7, 3))
    w = r.standard_normal((7, 1))

    def loss():
        return float(np.sum(w * net(x)))

    _, cache = net.forward(x)
    grads, d_in = net.backward(cache, w)
    numeric = central_diff(loss, net.params)
    assert rel_error(grads, numeric) < 1e-4
    xs = x.copy()

    def loss_x():
        return float(np.sum(w * net(xs)))

    assert rel_error([d_in], central_diff(loss_x, [xs])) < 1e-4


def test_adam_zero_grad_keeps_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.1)
    opt.step([np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0])
    assert opt.t == 1


def test_adam_moments_decay():
    opt = Adam([np.zeros(2)], lr=0.1)
    opt.m[0][...] = 1.0
    opt.v[0][...] = 1.0
    opt.step([np.zeros(2)])
    assert np.allclose(opt.m[0], 0.9) and np.allclose(opt.v[0], 0.999)


def test_adam_first_step_is_sign():
    p = [np.array([0.0, 0.0, 0.0])]
    Adam(p, lr=0.01, eps=1e-16).step([np.array([3.0, -1e-3, 50.0])])
    assert np.allclose(p[0], [-0.01, 0.01, -0.01], atol=1e-12)


def test_adam_quadratic_descent():
    x = [np.array([1.0])]
    opt = Adam(x, lr=0.1)
    for _ in range(100):
        opt.step([2.0 * x[0]])
    assert abs(x[0][0]) < 0.1


def test_adam_shape_error():
    opt = Adam([np.zeros(2)])
    with pytest.raises(ShapeError):
        opt.step([np.zeros(3)])


def test_kl_known_values():
    assert kl_diag(DiagGaussian.standard(3), DiagGaussian.standard(3)) == 0.0
    assert kl_diag(DiagGaussian([1.0], [1.0]), DiagGaussian([0.0], [1.0])) == pytest.approx(0.5, abs=1e-15)


def test_kl_errors():
    with pytest.raises(ShapeError):
        kl_diag(DiagGaussian.standard(2), DiagGaussian.standard(3))
    with pytest.raises(DomainError):
        DiagGaussian([0.0], [0.0])
    with pytest.raises(ShapeError):
        DiagGaussian([0.0, 1.0], [1.0])


def _log_ratio(x, q, p):
    log_q = -0.5 * np.sum((x - q.mean) ** 2 / q.var + np.log(2 * np.pi * q.var), axis=1)
    log_p = -0.5 * np.sum((x - p.mean) ** 2 / p.var + np.log(2 * np.pi * p.var), axis=1)
    return log_q - log_p


def monte_carlo_kl_pairs(r):
    """50 random 5-d pairs with 1e5-sample antithetic Monte-Carlo KL estimates."""
    out = []
    for _ in range(50):
        q = DiagGaussian(0.5 * r.standard_normal(5), np.exp(r.uniform(-0.3, 0.3, 5)))
        p = DiagGaussian(0.5 * r.standard_normal(5), np.exp(r.uniform(-0.3, 0.3, 5)))
        h = r.standard_normal((50_000, 5))
        x = np.concatenate([q.mean + np.sqrt(q.var) * h, q.mean - np.sqrt(q.var) * h])
        out.append((q, p, float(np.mean(_log_ratio(x, q, p)))))
    return out


def test_kl_monte_carlo():
    for q, p, mc in monte_carlo_kl_pairs(np.random.default_rng(7)):
        assert abs(kl_diag(q, p) - mc) < 1e-2


def test_kl_monte_carlo_wide_pairs():
    # wider pairs: plain estimator, error judged against its own standard error
    r = np.random.default_rng(11)
    for _ in range(20):
        q = DiagGaussian(r.standard_normal(5), np.exp(r.uniform(-1.0, 1.0, 5)))
        p = DiagGaussian(r.standard_normal(5), np.exp(r.uniform(-1.0, 1.0, 5)))
        x = q.mean + np.sqrt(q.var) * r.standard_normal((100_000, 5))
        ratio = _log_ratio(x, q, p)
        se = ratio.std() / np.sqrt(len(ratio))
        assert abs(kl_diag(q, p) - ratio.mean()) < 5 * se


def test_kl_gradients(rng):
    mq, vq = rng.standard_normal(4), np.exp(rng.standard_normal(4))
    mp, vp = rng.standard_normal(4), np.exp(rng.standard_normal(4))
    _, dm, dv = kl_terms(mq, vq, mp, vp)
    numeric = central_diff(lambda: float(kl_terms(mq, vq, mp, vp)[0]), [mq, vq])
    assert rel_error([dm, dv], numeric) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_kl_self_is_zero_and_nonnegative(means, logv):
    d = len(means)
    q = DiagGaussian(np.array(means), np.exp(np.array(logv[:d])))
    assert kl_diag(q, q) <= 1e-12
    p = DiagGaussian(np.array(means)[::-1], np.exp(np.array(logv[:d]))[::-1])
    assert kl_diag(q, p) >= 0.0


def test_gaussian_sample_degenerate_and_lln(rng):
    g = DiagGaussian([0.7, -0.2], [1e-30, 1e-30])
    assert np.allclose(gaussian_sample(g, rng), g.mean, atol=1e-10)
    x = np.array([gaussian_sample(DiagGaussian.standard(1), rng)[0] for _ in range(100_000)])
    assert abs(x.mean()) < 0.02 and abs(x.var() - 1.0) < 0.05


def test_gaussian_sample_deterministic():
    g = DiagGaussian([1.0, 2.0], [0.5, 0.25])
    a = gaussian_sample(g, np.random.default_rng(3))
    b = gaussian_sample(g, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_reparameterization_gradient(rng):
    mean, var = rng.standard_normal(3), np.exp(rng.standard_normal(3))
    eps = rng.standard_normal(3)
    w = rng.standard_normal(3)
    f = lambda: float(w @ gaussian_sample(DiagGaussian(mean, var), rng, noise=eps))
    analytic = [w, w * eps / (2 * np.sqrt(var))]
    assert rel_error(analytic, central_diff(f, [mean, var])) < 1e-6


def test_clamp_log_var():
    var, grad = clamp_log_var(np.array([-20.0, 0.0, 10.0]))
    assert np.allclose(var, [np.exp(-10.0), 1.0, np.exp(6.0)])
    assert np.array_equal(grad, [0.0, 1.0, 0.0])
