"""Problem definitions: objectives, gradients, residuals, data generators."""

import numpy as np
import pytest

from ltof import autodiff as ad
from ltof import problems


def finite_diff_x(problem, x, zeta, step=1e-6):
    g = np.zeros_like(x)
    for b in range(x.shape[0]):
        for i in range(x.shape[1]):
            up = x.copy(); up[b, i] += step
            dn = x.copy(); dn[b, i] -= step
            g[b, i] = (problem.objective(up, zeta)[b]
                       - problem.objective(dn, zeta)[b]) / (2 * step)
    return g


def finite_diff_zeta(problem, x, zeta, step=1e-6):
    g = np.zeros_like(zeta)
    for b in range(zeta.shape[0]):
        for i in range(zeta.shape[1]):
            up = zeta.copy(); up[b, i] += step
            dn = zeta.copy(); dn[b, i] -= step
            g[b, i] = (problem.objective(x, up)[b]
                       - problem.objective(x, dn)[b]) / (2 * step)
    return g


def _instances(rng):
    cov = rng.uniform(-0.2, 0.2, size=(4, 4))
    cov = cov @ cov.T + 0.1 * np.eye(4)
    yield (problems.PortfolioProblem(cov, risk_weight=2.0), 4)
    yield (problems.generate_nonconvex_instance(5, 2, 3, seed=3), 5)
    yield (problems.Toy2DProblem(), 2)


def test_analytic_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for problem, n in _instances(rng):
        for _ in range(100):
            x = rng.normal(size=(2, n))
            zeta = rng.uniform(0.5, 2.0, size=(2, problem.param_dim))
            gx = problem.objective_grad_x(x, zeta)
            gz = problem.objective_grad_zeta(x, zeta)
            np.testing.assert_allclose(gx, finite_diff_x(problem, x, zeta),
                                       rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose(gz, finite_diff_zeta(problem, x, zeta),
                                       rtol=1e-6, atol=1e-6)


def test_objective_graph_agrees_with_numpy_objective():
    rng = np.random.default_rng(1)
    for problem, n in _instances(rng):
        x = rng.normal(size=(3, n))
        zeta = rng.uniform(0.5, 2.0, size=(3, problem.param_dim))
        tape = ad.Tape()
        xv = ad.constant(tape, x)
        out = problem.objective_graph(tape, xv, zeta)
        np.testing.assert_allclose(out.value, problem.objective(x, zeta), atol=1e-12)
        # and its x-gradient agrees with the analytic one
        grads = ad.backward(tape, ad.reduce_sum(out))
        np.testing.assert_allclose(ad.grad_of(grads, xv),
                                   problem.objective_grad_x(x, zeta), atol=1e-9)


def test_residual_conventions():
    prob = problems.generate_nonconvex_instance(5, 2, 3, seed=5)
    x = np.random.default_rng(2).normal(size=(4, 5))
    np.testing.assert_allclose(prob.eq_residuals(x), x @ prob.A.T - prob.b, atol=1e-14)
    np.testing.assert_allclose(prob.ineq_residuals(x), x @ prob.G.T - prob.h, atol=1e-14)
    # the stored witness satisfies everything by construction
    w = prob.witness[None, :]
    assert np.abs(prob.eq_residuals(w)).max() < 1e-12
    assert prob.ineq_residuals(w).max() < 1e-12


def test_portfolio_simplex_constraint_matrices():
    prob = problems.PortfolioProblem(np.eye(3) * 0.1, risk_weight=1.0)
    np.testing.assert_array_equal(prob.A, np.ones((1, 3)))
    np.testing.assert_array_equal(prob.b, np.ones(1))
    np.testing.assert_array_equal(prob.G, -np.eye(3))
    np.testing.assert_array_equal(prob.h, np.zeros(3))
    assert prob.sense == "maximize"


def test_portfolio_covariance_is_psd_and_deterministic():
    p1, z1 = problems.generate_portfolio_data(8, 3, 100, seed=9)
    p2, z2 = problems.generate_portfolio_data(8, 3, 100, seed=9)
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(p1.cov, p2.cov)
    eigs = np.linalg.eigvalsh(p1.cov)
    assert eigs.min() > 0
    p3, z3 = problems.generate_portfolio_data(8, 3, 100, seed=10)
    assert np.abs(z3 - z1).max() > 1e-6


def test_portfolio_samples_cycle_over_the_base_series():
    _, zeta = problems.generate_portfolio_data(4, 2, 250, seed=0, noise_std=0.0,
                                               base_len=100)
    # with zero observation noise, sample i equals sample i+base_len exactly
    np.testing.assert_array_equal(zeta[:100], zeta[100:200])
    np.testing.assert_array_equal(zeta[200:], zeta[:50])
    _, noisy = problems.generate_portfolio_data(4, 2, 250, seed=0, noise_std=0.3,
                                                base_len=100)
    assert np.abs(noisy[:100] - noisy[100:200]).max() > 1e-3


def test_portfolio_generator_validates_arguments():
    with pytest.raises(ValueError):
        problems.generate_portfolio_data(3, 5, 10, seed=0)
    with pytest.raises(ValueError):
        problems.generate_portfolio_data(3, 2, 10, seed=0, persistence=1.0)
    with pytest.raises(ValueError):
        problems.generate_portfolio_data(3, 2, 10, seed=0, base_len=0)


def test_nonconvex_instance_shapes_and_feasibility():
    prob = problems.generate_nonconvex_instance(7, 3, 4, seed=1)
    assert prob.Q.shape == (7, 7)
    assert prob.A.shape == (3, 7) and prob.G.shape == (4, 7)
    assert np.linalg.eigvalsh(prob.Q).min() >= -1e-10
    with pytest.raises(ValueError):
        problems.generate_nonconvex_instance(4, 4, 2, seed=1)


def test_dataset_split_and_validation():
    z = np.zeros((10, 3))
    zeta = np.zeros((10, 2))
    mask = np.zeros(10, dtype=bool)
    mask[7:] = True
    ds = problems.PtoDataset(z, zeta, test_mask=mask)
    np.testing.assert_array_equal(ds.test_idx, [7, 8, 9])
    np.testing.assert_array_equal(ds.train_idx, np.arange(7))
    with pytest.raises(ValueError):
        problems.PtoDataset(z, zeta[:5])
    with pytest.raises(ValueError):
        problems.PtoDataset(z, zeta, x_star=np.zeros((4, 2)))


def test_make_split_fraction_and_determinism():
    m1 = problems.make_split(100, 0.2, seed=3)
    m2 = problems.make_split(100, 0.2, seed=3)
    np.testing.assert_array_equal(m1, m2)
    assert m1.sum() == 20
    assert problems.make_split(100, 0.2, seed=4).tolist() != m1.tolist()
