import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samplelin import rng as rngmod
from samplelin.errors import ContractError, DivergenceError, ParameterError
from samplelin.model import DenseDesign, NoisePrecision, PriorPrecision
from samplelin.oracle import (
    dense_curvature,
    primal_sample,
    variance_gap_closed_form,
    variance_gap_datapoint_exact,
)
from samplelin.sampler import (
    SampleSet,
    SgdConfig,
    draw_samples,
    grad_variance_gap,
    loss_L,
    loss_Lprime,
    max_curvature,
    minibatch_grad,
    prefers_Lprime_at_convergence,
    sgd_minimize,
)

from conftest import random_instance


def fd_grad(f, z, h=1e-6):
    return np.array([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(len(z))])


def test_draw_samples_invariants(rng):
    op, B, A, _ = random_instance(rng, n=5, m=2, d=4, correlated=True)
    s = draw_samples(op, B, A, 6, seed=3, with_noise=True)
    assert s.k == 6
    # theta_n is defined as theta0 + theta'; subtraction recovers theta' up to rounding
    np.testing.assert_array_equal(s.theta_n, s.theta0 + s.theta_prime)
    tol = 4 * np.finfo(float).eps * np.abs(s.theta_n).max()
    np.testing.assert_allclose(s.theta_n - s.theta0, s.theta_prime, rtol=0, atol=tol)
    np.testing.assert_array_equal(s.z, s.theta0)
    np.testing.assert_allclose(s.theta_prime, A.solve(op.rmatvec(B.apply(s.eps))), rtol=1e-12)


def test_draw_samples_are_order_independent(rng):
    op, B, A, _ = random_instance(rng)
    full = draw_samples(op, B, A, 6, seed=9)
    tail = draw_samples(op, B, A, 3, seed=9, start=3)
    np.testing.assert_array_equal(full.theta0[:, 3:], tail.theta0)
    np.testing.assert_array_equal(full.theta_prime[:, 3:], tail.theta_prime)
    job = full.job(4)
    assert job.index == 4
    back = SampleSet.from_jobs([full.job(j) for j in range(6)])
    np.testing.assert_array_equal(back.theta_n, full.theta_n)
    with pytest.raises(ParameterError):
        draw_samples(op, B, A, 0, seed=9)


def test_sgd_config_validation():
    with pytest.raises(ParameterError):
        SgdConfig(lr=0.0)
    with pytest.raises(ParameterError):
        SgdConfig(decay_fraction=0.0)
    with pytest.raises(ParameterError):
        SgdConfig(momentum=1.0)
    cfg = SgdConfig(lr=1.0, decay_factor=10.0, decay_fraction=0.5)
    assert cfg.lr_at(0, 100) == 1.0
    assert cfg.lr_at(50, 100) == pytest.approx(0.1)
    assert cfg.lr_at(99, 100) == pytest.approx(0.1)


def test_loss_L_examples():
    op = DenseDesign(np.eye(2))
    B = NoisePrecision.isotropic(2, 1)
    A = PriorPrecision.isotropic_prior(1.0, 2)
    val, g = loss_L(np.zeros(2), op, B, A, np.array([2.0, 4.0]), np.zeros(2))
    assert val == 10.0
    t0 = np.array([1.0, -1.0])
    val, g = loss_L(t0, op, B, A, op.matvec(t0), t0)
    assert val == 0.0 and np.all(g == 0.0)


def test_loss_Lprime_zero_design():
    op = DenseDesign(np.zeros((3, 2)))
    B = NoisePrecision.isotropic(3, 1)
    A = PriorPrecision.isotropic_prior(2.0, 2)
    tn = np.array([0.3, -0.7])
    assert np.all(loss_Lprime(tn, op, B, A, tn)[1] == 0.0)


def test_loss_gradients_match_finite_differences(rng):
    op, B, A, _ = random_instance(rng, n=4, m=2, d=3, alpha=0.5, correlated=True)
    z, t0, tn, eps = (rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3),
                      rng.standard_normal(8))
    g = loss_L(z, op, B, A, eps, t0)[1]
    np.testing.assert_allclose(g, fd_grad(lambda x: loss_L(x, op, B, A, eps, t0)[0], z), rtol=1e-6)
    g = loss_Lprime(z, op, B, A, tn)[1]
    np.testing.assert_allclose(g, fd_grad(lambda x: loss_Lprime(x, op, B, A, tn)[0], z), rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_losses_have_identical_gradients(seed):
    g = np.random.default_rng(seed)
    op, B, A, _ = random_instance(g, n=5, m=2, d=4, alpha=g.uniform(0.1, 10), correlated=True)
    z, t0, eps = g.standard_normal(4), g.standard_normal(4), g.standard_normal(10)
    tn = t0 + A.solve(op.rmatvec(B.apply(eps)))
    gl = loss_L(z, op, B, A, eps, t0)[1]
    glp = loss_Lprime(z, op, B, A, tn)[1]
    np.testing.assert_allclose(gl, glp, atol=1e-12 * max(1.0, np.abs(gl).max()))


def test_minibatch_gradient_unbiased(rng):
    op, B, A, _ = random_instance(rng, n=7, m=2, d=3, correlated=True)
    z, t0, eps = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(14)
    full = loss_L(z, op, B, A, eps, t0)[1]
    kw = dict(eps=eps, theta0=t0)
    np.testing.assert_allclose(minibatch_grad(z, np.arange(7), "L", op, B, A, **kw), full, rtol=1e-12)
    mean = np.mean([minibatch_grad(z, np.array([i]), "L", op, B, A, **kw) for i in range(7)], axis=0)
    np.testing.assert_allclose(mean, full, atol=1e-10)
    with pytest.raises(ContractError):
        minibatch_grad(z, np.array([7]), "L", op, B, A, **kw)
    with pytest.raises(ParameterError):
        minibatch_grad(z, None, "Q", op, B, A, **kw)


def test_minibatch_gradient_monte_carlo(rng):
    op, B, A, _ = random_instance(rng, n=7, d=3)
    z, tn = rng.standard_normal(3), rng.standard_normal(3)
    full = loss_Lprime(z, op, B, A, tn)[1]
    idx = rng.integers(0, 7, 100_000)
    G = np.stack([minibatch_grad(z, np.array([i]), "Lprime", op, B, A, theta_n=tn) for i in range(7)])
    draws = G[idx]
    se = draws.std(axis=0) / np.sqrt(len(idx))
    assert np.all(np.abs(draws.mean(axis=0) - full) <= 5 * se)


def test_sgd_zero_design_converges_to_theta_n():
    op = DenseDesign(np.zeros((4, 3)))
    B = NoisePrecision.isotropic(4, 1)
    A = PriorPrecision.isotropic_prior(1.0, 3)
    s = draw_samples(op, B, A, 2, seed=0)
    cfg = SgdConfig(lr=0.5, momentum=0.0, epochs=60, decay_factor=1.0, clip_norm=None)
    np.testing.assert_allclose(sgd_minimize(s, cfg, "Lprime", op, B, A), s.theta_n, atol=1e-12)


@pytest.mark.parametrize("variant", ["L", "Lprime"])
def test_sgd_identity_fixture(identity, variant):
    op, B, A, _ = identity
    s = draw_samples(op, B, A, 3, seed=1, with_noise=True)
    cfg = SgdConfig(lr=0.2, momentum=0.5, epochs=200, decay_factor=1.0, clip_norm=None)
    z = sgd_minimize(s, cfg, variant, op, B, A)
    np.testing.assert_allclose(z, (s.theta0 + s.eps) / 2, atol=1e-10)


@pytest.mark.parametrize("variant", ["L", "Lprime"])
def test_sgd_minibatch_matches_closed_form(variant):
    g = np.random.default_rng(7)
    op, B, A, _ = random_instance(g, n=200, d=50, alpha=1.0, scale=0.2)
    s = draw_samples(op, B, A, 4, seed=2, with_noise=True)
    lr = 0.02 / max_curvature(op, B, A)
    cfg = SgdConfig(lr=lr, momentum=0.9, batch_size=8, epochs=200, decay_factor=100.0, clip_norm=None)
    z = sgd_minimize(s, cfg, variant, op, B, A)
    ref = primal_sample(op, B, A, s.theta0, s.eps)
    err = np.sum((z - ref) ** 2, axis=0) / np.sum(ref**2, axis=0)
    assert np.all(err <= 1e-3)


def test_sgd_trace_rows(identity):
    op, B, A, _ = identity
    s = draw_samples(op, B, A, 2, seed=1, with_noise=True)
    ref = primal_sample(op, B, A, s.theta0, s.eps)
    trace = []
    sgd_minimize(s, SgdConfig(lr=0.2, epochs=5, clip_norm=None), "L", op, B, A, reference=ref, trace=trace)
    assert len(trace) == 2 * 6
    assert trace[0][0] == 0 and trace[-1][0] == 5
    assert trace[-1][3] < trace[0][3]


def test_sgd_divergence_detected(identity):
    op, B, A, _ = identity
    s = draw_samples(op, B, A, 1, seed=1)
    with pytest.raises(DivergenceError, match="learning rate"):
        sgd_minimize(s, SgdConfig(lr=50.0, momentum=0.0, epochs=50, clip_norm=None), "Lprime", op, B, A)


def test_sgd_L_requires_noise(identity):
    op, B, A, _ = identity
    with pytest.raises(ParameterError):
        sgd_minimize(draw_samples(op, B, A, 1, seed=1), SgdConfig(), "L", op, B, A)


def test_variance_gap_identity_init(identity):
    op, B, A, _ = identity
    est = grad_variance_gap(op, B, A, 20_000, rngmod.stream(0, "mc"), at="init")
    assert abs(est.estimate - 2.0) <= 5 * est.stderr


def test_variance_gap_zero_design():
    op = DenseDesign(np.zeros((3, 2)))
    est = grad_variance_gap(op, NoisePrecision.isotropic(3, 1), PriorPrecision.isotropic_prior(1.0, 2),
                            100, rngmod.stream(0, "mc"))
    assert est.estimate == 0.0


def test_variance_gap_batch_form_matches_closed_form(rng):
    op, B, A, _ = random_instance(rng, n=6, m=2, d=4, alpha=0.8, correlated=True)
    M = dense_curvature(op, B)
    for at in ("init", "converged"):
        est = grad_variance_gap(op, B, A, 20_000, rngmod.stream(1, "mc"), at=at, form="batch")
        assert abs(est.estimate - variance_gap_closed_form(M, A, at)) <= 5 * est.stderr


def test_variance_gap_datapoint_form_at_optimum(rng):
    op, B, A, _ = random_instance(rng, n=6, m=2, d=4, alpha=0.8, correlated=True)
    est = grad_variance_gap(op, B, A, 20_000, rngmod.stream(2, "mc"), at="converged")
    assert abs(est.estimate - variance_gap_datapoint_exact(op, B, A)) <= 5 * est.stderr


def test_variance_gap_forms_agree_for_single_datapoint(rng):
    op, B, A, _ = random_instance(rng, n=1, m=3, d=4, alpha=0.5, correlated=True)
    M = dense_curvature(op, B)
    assert variance_gap_datapoint_exact(op, B, A) == pytest.approx(variance_gap_closed_form(M, A, "converged"))
    with pytest.raises(ParameterError):
        grad_variance_gap(op, B, A, 10, rngmod.stream(0, "mc"), form="other")


def test_prefers_Lprime_examples():
    assert prefers_Lprime_at_convergence(5.5, 1300, 29226) is False
    assert prefers_Lprime_at_convergence(1e4, 700, 1.1e7) is True
    with pytest.raises(ParameterError):
        prefers_Lprime_at_convergence(0.0, 1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_large_alpha_always_prefers_Lprime(seed):
    g = np.random.default_rng(seed)
    op, B, _, _ = random_instance(g, n=6, d=4)
    M = dense_curvature(op, B)
    alpha = 1.01 * np.linalg.eigvalsh(M).max()
    H = M + alpha * np.eye(4)
    gamma = np.trace(np.linalg.solve(H, M))
    assert prefers_Lprime_at_convergence(alpha, gamma, np.trace(M))


def test_max_curvature(rng):
    op, B, A, _ = random_instance(rng, n=10, d=4)
    M = dense_curvature(op, B)
    lam = np.linalg.eigvalsh(M + np.diag(A.diag)).max()
    assert max_curvature(op, B, A, iters=500) == pytest.approx(lam, rel=1e-6)
