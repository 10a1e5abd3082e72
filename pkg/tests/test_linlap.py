import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp

from samplelin.em import run_em
from samplelin.errors import ContractError, ParameterError
from samplelin.linlap import (
    block_rescaled,
    curvature_blocks,
    eval_metrics,
    kadic_joint_ll,
    kadic_joint_ll_from_sets,
    kadic_partitions,
    linearize,
    predictive_samples,
    probit_predict,
    stabilized_covariance,
    sym_kl,
    wasserstein2,
)
from samplelin.mlp import MLP, ConstantPredictor, LinearPredictor
from samplelin.model import NoisePrecision, PriorPrecision, apply_gprior, gprior_exact, softmax
from samplelin.oracle import dense_curvature, exact_em, exact_posterior, exact_sample
from samplelin.sampler import SgdConfig


def test_linearize_linear_model_is_itself(rng):
    w = rng.standard_normal(3)
    X = rng.standard_normal((6, 3))
    sur = linearize(LinearPredictor(w), X)
    np.testing.assert_allclose(sur.design.to_dense(), X, rtol=1e-14)
    np.testing.assert_allclose(sur.offset, 0.0, atol=1e-14)
    theta = rng.standard_normal(3)
    np.testing.assert_allclose(sur.predict(theta)[:, 0], X @ theta, rtol=1e-12)


def test_linearize_constant_model():
    sur = linearize(ConstantPredictor([1.5, -2.0], dim=4), np.zeros((3, 2)))
    assert np.all(sur.design.to_dense() == 0)
    np.testing.assert_array_equal(sur.offset, [[1.5, -2.0]] * 3)
    np.testing.assert_array_equal(sur.delta, -sur.offset.reshape(-1))


def test_linearized_mlp(rng):
    net = MLP.two_hidden(2, 2, width=5, seed=3)
    X = rng.standard_normal((7, 2))
    sur = linearize(net, X)
    # surrogate reproduces the network at the linearisation point
    np.testing.assert_allclose(sur.predict(net.params), net.forward(X), rtol=1e-12, atol=1e-12)
    v, h = rng.standard_normal(net.dim), 1e-6
    fd = (net.with_params(net.params + h * v).forward(X) - net.with_params(net.params - h * v).forward(X)) / (2 * h)
    jv = sur.design.matvec(v).reshape(7, 2)
    assert np.linalg.norm(jv - fd) <= 1e-5 * np.linalg.norm(fd)
    np.testing.assert_allclose(sur.design.block(3), sur.design.to_dense()[6:8], rtol=1e-12)
    with pytest.raises(ParameterError):
        linearize(net, X, "poisson")


def test_curvature_blocks_examples():
    B = curvature_blocks("categorical", np.log([[0.5, 0.5]]))
    np.testing.assert_allclose(B.blocks[0], [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
    B = curvature_blocks("categorical", np.array([[800.0, 0.0]]))
    np.testing.assert_array_equal(B.blocks[0], np.zeros((2, 2)))
    G = curvature_blocks("gaussian", np.zeros(3), noise_variance=0.25)
    np.testing.assert_array_equal(G.blocks, np.broadcast_to(4 * np.eye(1), (3, 1, 1)))
    with pytest.raises(ParameterError):
        curvature_blocks("gaussian", np.zeros(3), noise_variance=0.0)
    with pytest.raises(ParameterError):
        curvature_blocks("poisson", np.zeros(3))


def cross_entropy_grad(f, label):
    return softmax(f) - np.eye(len(f))[label]


def test_curvature_matches_cross_entropy_hessian(rng):
    F = 2 * rng.standard_normal((10, 4))
    B = curvature_blocks("categorical", F)
    h = 1e-5
    for i, f in enumerate(F):
        Bi = B.blocks[i]
        assert np.all(np.linalg.eigvalsh(Bi) >= -1e-15)
        np.testing.assert_allclose(Bi.sum(axis=1), 0.0, atol=1e-15)
        fd = np.stack([(cross_entropy_grad(f + h * e, 1) - cross_entropy_grad(f - h * e, 1)) / (2 * h)
                       for e in np.eye(4)], axis=1)
        np.testing.assert_allclose(Bi, fd, atol=1e-6)


def test_predictive_samples_examples(rng):
    net = MLP.two_hidden(2, 3, width=4, seed=0)
    X = rng.standard_normal((5, 2))
    ps = predictive_samples(X, np.zeros((net.dim, 4)), net)
    assert ps.k == 4
    np.testing.assert_array_equal(ps.samples, np.repeat(net.forward(X)[:, :, None], 4, axis=2))
    w = rng.standard_normal(2)
    Z = rng.standard_normal((2, 6))
    lin = predictive_samples(X, Z, LinearPredictor(w))
    np.testing.assert_allclose(lin.samples[:, 0, :], X @ (w[:, None] + Z), rtol=1e-12)
    with pytest.raises(ContractError):
        predictive_samples(X, np.zeros((3, 2)), LinearPredictor(w))


def test_predictive_covariance_matches_oracle(rng):
    net = MLP.two_hidden(1, 2, width=3, seed=1)
    X = rng.standard_normal((20, 1))
    sur = linearize(net, X)
    B = NoisePrecision.isotropic(20, 2)
    post = exact_posterior(sur.design, B, PriorPrecision.isotropic_prior(1.0, net.dim), np.zeros((20, 2)))
    k = 10_000
    Z = exact_sample(post, np.random.default_rng(7), size=k)
    x = np.array([[0.3]])
    dev = predictive_samples(x, Z, net).deviations[0]
    J = np.stack([net.jvp(x, e)[0] for e in np.eye(net.dim)], axis=1)
    C = J @ np.linalg.solve(post.precision, J.T)
    emp = dev @ dev.T / k
    se = np.sqrt((C**2 + np.outer(np.diag(C), np.diag(C))) / k)
    assert np.all(np.abs(emp - C) <= 5 * se)


def test_probit_examples(rng):
    f = rng.standard_normal((4, 3))
    assert np.array_equal(probit_predict(f, np.zeros((4, 3, 5))), softmax(f))
    np.testing.assert_allclose(probit_predict(np.zeros(3), rng.standard_normal((3, 8))), np.full(3, 1 / 3))
    p = probit_predict(np.array([1.0, -1.0]), np.ones((2, 4)))
    base = softmax(np.array([1.0, -1.0]))
    assert 0.5 < p[0] < base[0]
    # scale is sqrt(1 + pi/2 * 1)
    np.testing.assert_allclose(p, softmax(np.array([1.0, -1.0]) / math.sqrt(1 + math.pi / 2)))
    with pytest.raises(ParameterError):
        probit_predict(f, np.zeros((4, 3, 0)))


@settings(max_examples=50, deadline=None)
@given(f=arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)),
       dev=arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
def test_probit_is_a_distribution(f, dev):
    p = probit_predict(f, dev)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12


def brute_force_joint_ll(loglik, sets):
    vals = []
    for items, counts in sets:
        replicated = np.repeat(items, counts)
        vals.append(logsumexp(loglik[:, replicated].sum(axis=1)) - math.log(loglik.shape[0]))
    return np.mean(vals)


def test_kadic_plain_joint_ll(rng):
    L = np.log(rng.dirichlet(np.ones(3), size=(4, 6))[:, :, 0])
    sets = kadic_partitions(6, 3, 3, 2, rng)
    assert all(np.array_equal(c, [1, 1, 1]) for _, c in sets)
    plain = np.mean([logsumexp(L[:, it].sum(axis=1)) - math.log(4) for it, _ in sets])
    assert kadic_joint_ll_from_sets(L, sets) == pytest.approx(plain, abs=1e-12)
    # one sample: no mixture, just the summed log-likelihood
    one = kadic_joint_ll_from_sets(L[:1], sets)
    assert one == pytest.approx(np.mean([L[0, it] @ c for it, c in sets]), abs=1e-12)


def test_kadic_matches_replication_three_classes(rng):
    N, k = 12, 5
    probs = rng.dirichlet(np.ones(3), size=(k, N))
    labels = rng.integers(0, 3, N)
    L = np.log(probs[:, np.arange(N), labels])
    sets = kadic_partitions(N, 2, 10, 3, np.random.default_rng(4))
    assert all(len(it) == 2 and c.sum() == 10 and c.min() >= 1 for it, c in sets)
    assert len(sets) == 3 * (N // 2)
    assert kadic_joint_ll_from_sets(L, sets) == pytest.approx(brute_force_joint_ll(L, sets), abs=1e-10)
    a = kadic_joint_ll(L, 2, 10, 3, np.random.default_rng(4))
    assert a == kadic_joint_ll_from_sets(L, sets)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 8), kappa=st.integers(1, 3), extra=st.integers(0, 3))
def test_kadic_replication_property(seed, k, kappa, extra):
    g = np.random.default_rng(seed)
    tau = min(kappa + extra, 6)
    L = np.log(g.uniform(0.01, 1.0, (k, 7)))
    sets = kadic_partitions(7, kappa, tau, 2, g)
    assert abs(kadic_joint_ll_from_sets(L, sets) - brute_force_joint_ll(L, sets)) <= 1e-10


def test_kadic_errors(rng):
    with pytest.raises(ParameterError):
        kadic_partitions(10, 4, 3, 1, rng)
    with pytest.raises(ParameterError):
        kadic_partitions(2, 3, 5, 1, rng)


def test_stabilized_covariance_examples():
    np.testing.assert_array_equal(stabilized_covariance(np.array([[1.0, 2.0]])), [[1.0, 1.0], [1.0, 4.0]])
    np.testing.assert_array_equal(stabilized_covariance(np.zeros((5, 3))), np.zeros((3, 3)))
    x = np.random.default_rng(0).standard_normal((200_000, 3)) * np.array([1.0, 2.0, 0.5])
    np.testing.assert_allclose(stabilized_covariance(x), np.diag([1.0, 4.0, 0.25]), atol=0.03)


def test_sym_kl_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert sym_kl(p, p) == 0.0
    eps = 1e-3
    expected = 2 * (1 - 2 * eps) * math.log((1 - eps) / eps)
    assert sym_kl(np.array([1.0, 0.0]), np.array([0.0, 1.0]), eps=eps) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ParameterError):
        sym_kl(np.array([0.5, 0.6]), p[:2])
    with pytest.raises(ParameterError):
        sym_kl(np.array([1.5, -0.5]), np.array([0.5, 0.5]))


def test_wasserstein_examples(rng):
    G = rng.standard_normal((3, 3))
    C = G @ G.T
    assert wasserstein2(np.zeros(3), C, np.array([3.0, 4.0, 0.0]), C) == pytest.approx(5.0, abs=1e-6)
    # 1-d: |mu_a - mu_b|^2 + (sd_a - sd_b)^2
    assert wasserstein2(0.0, 4.0, 1.0, 1.0) == pytest.approx(math.sqrt(2.0))
    assert wasserstein2(np.zeros(3), C, np.zeros(3), C) == pytest.approx(0.0, abs=1e-6)


def test_eval_metrics(rng):
    p = rng.dirichlet(np.ones(3), size=5)
    logits = rng.standard_normal((5, 40, 3))
    out = eval_metrics(p, p, logits, logits)
    assert out["sym_kl"] == 0.0 and out["w2"] == pytest.approx(0.0, abs=1e-6)
    assert set(eval_metrics(p, p)) == {"sym_kl"}
    shifted = eval_metrics(p, p, logits, logits + np.array([0.0, 3.0, 4.0]))
    assert shifted["w2"] == pytest.approx(5.0, abs=1e-6)


@pytest.mark.parametrize("factor", [0.1, 1.0, 10.0])
def test_block_rescaling_leaves_gprior_features_unchanged(rng, factor):
    net = MLP.two_hidden(2, 1, width=4, seed=5)
    X = rng.standard_normal((15, 2))
    sur = linearize(net, X)
    B = NoisePrecision.isotropic(15, 1)
    first = np.flatnonzero(net.layer_index == 0)
    ref = apply_gprior(sur.design, gprior_exact(sur.design, B)).to_dense()
    scaled = block_rescaled(sur.design, first, factor)
    np.testing.assert_allclose(scaled.to_dense()[:, first], factor * sur.design.to_dense()[:, first], rtol=1e-14, atol=1e-15)
    out = apply_gprior(scaled, gprior_exact(scaled, B)).to_dense()
    np.testing.assert_allclose(out, ref, rtol=1e-8, atol=1e-14)


def test_linear_pipeline_reproduces_oracle():
    g = np.random.default_rng(21)
    X = g.standard_normal((60, 3))
    w_true = g.standard_normal(3)
    Y = X @ w_true + g.standard_normal(60)
    sur = linearize(LinearPredictor(np.zeros(3)), X)
    B = curvature_blocks("gaussian", sur.base)
    prob = sur.problem(Y, B)
    cfg = SgdConfig(lr=1.0, momentum=0.9, epochs=300, decay_factor=1.0, clip_norm=None)
    k_pred = 10_000
    state = run_em(prob, 4096, 30, cfg, cfg, seed=0, tol=1e-5, k_pred=k_pred, auto_lr=0.5)
    a_exact, _ = exact_em(sur.design, B, Y, 1.0, tol=1e-10, max_steps=500)
    assert state.alpha == pytest.approx(a_exact, rel=0.05)
    H = dense_curvature(sur.design, B) + state.alpha * np.eye(3)
    C = np.linalg.inv(H)
    Z = state.prediction_samples
    emp = Z @ Z.T / k_pred
    se = np.sqrt((C**2 + np.outer(np.diag(C), np.diag(C))) / k_pred)
    assert np.all(np.abs(emp - C) <= 5 * se)
