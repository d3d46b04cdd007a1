"""Solver correctness against independent references.

The frozen numbers below were produced by scipy.optimize (SLSQP with
analytic jacobians, ftol 1e-14) and by dense grid searches, independent of
the iterative code under test.
"""

import numpy as np
import pytest

from ltof import problems, solvers
from ltof.harness import nonconvex_oracle_step


def proj_simplex_reference(v):
    """Sort-based Euclidean simplex projection (Held et al. style)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, len(v) + 1) > (css - 1.0))[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def test_project_simplex_matches_sort_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.normal(scale=rng.uniform(0.1, 5.0), size=rng.integers(2, 12))
        got = solvers.project_simplex(v)
        want = proj_simplex_reference(v)
        np.testing.assert_allclose(got, want, atol=1e-12)
        assert abs(got.sum() - 1.0) < 1e-12
        assert got.min() >= 0


def test_clip_normalize_restores_simplex_rows():
    x = np.array([[0.5, 0.3, 0.4],      # positive, off-simplex
                  [-0.2, 0.6, 0.2],     # one negative entry
                  [1.0, 1.0, 1.0]])
    out = solvers.clip_normalize(x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-15)
    assert out.min() >= 0
    np.testing.assert_allclose(out[0], [0.5, 0.3, 0.4] / np.sum([0.5, 0.3, 0.4]),
                               atol=1e-15)


def test_clip_normalize_dead_rows_fall_back_to_uniform():
    with pytest.warns(UserWarning):
        out = solvers.clip_normalize(np.array([[-1.0, -2.0, -0.5]]))
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def kkt_residual(P, q, A, b, G, h, x, tol_act=1e-7):
    """Max stationarity/complementarity violation with multipliers from
    an active-set least squares fit; small means x is a KKT point."""
    grad = P @ x + q
    cols = []
    if A is not None:
        cols.extend(A)
    act = []
    if G is not None:
        act = [i for i, (g, hh) in enumerate(zip(G @ x, h)) if hh - g < tol_act]
        cols.extend(G[act])
    primal = 0.0
    if A is not None:
        primal = max(primal, np.abs(A @ x - b).max())
    if G is not None:
        primal = max(primal, max(0.0, (G @ x - h).max()))
    if not cols:
        return max(primal, np.abs(grad).max())
    M = np.array(cols).T
    mult, *_ = np.linalg.lstsq(M, -grad, rcond=None)
    station = np.abs(M @ mult + grad).max()
    dual = 0.0
    if act:
        dual = max(0.0, -mult[len(b) if A is not None else 0:].min()) \
            if len(mult) > (len(b) if A is not None else 0) else 0.0
    return max(primal, station, dual)


def test_qp_solve_frozen_instance():
    # scipy SLSQP: x* = [0.8, 0.2], f* = 0.018
    P = np.array([[2.0, 0.3], [0.3, 1.5]])
    q = np.array([-1.0, 0.5])
    A = np.array([[1.0, 1.0]]); b = np.array([1.0])
    G = np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, -1.0]])
    h = np.array([0.0, 0.0, 0.6])
    sol = solvers.qp_solve(P, q, A=A, b=b, G=G, h=h, tol=1e-10)
    assert sol.status == "converged"
    np.testing.assert_allclose(sol.x, [0.8, 0.2], atol=1e-6)
    f = 0.5 * sol.x @ P @ sol.x + q @ sol.x
    assert abs(f - 0.018) < 1e-8
    assert sol.lambda_ineq.min() >= 0


def test_qp_solve_kkt_residuals_on_random_feasible_instances():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        n_eq = int(rng.integers(0, max(1, n - 1)))
        n_ineq = int(rng.integers(1, 6))
        M = rng.normal(size=(n, n))
        P = M @ M.T + 0.5 * np.eye(n)
        q = rng.normal(size=n)
        x0 = rng.normal(size=n)
        A = rng.normal(size=(n_eq, n)) if n_eq else None
        b = A @ x0 if n_eq else None
        G = rng.normal(size=(n_ineq, n))
        h = G @ x0 + rng.uniform(0.1, 1.0, size=n_ineq)
        sol = solvers.qp_solve(P, q, A=A, b=b, G=G, h=h, tol=1e-10)
        assert kkt_residual(P, q, A, b, G, h, sol.x) < 1e-5


def _portfolio_grid_best(cov, lam, z, step=0.01):
    """Dense simplex grid in D=3: w = (i, j, 1-i-j) * step."""
    ticks = np.arange(0.0, 1.0 + step / 2, step)
    ww = [(a, c, 1.0 - a - c) for a in ticks for c in ticks if a + c <= 1.0 + 1e-12]
    W = np.array(ww)
    W[:, 2] = np.maximum(W[:, 2], 0.0)
    vals = W @ z - lam * np.einsum("bi,ij,bj->b", W, cov, W)
    return vals.max()


def test_portfolio_oracle_frozen_and_grid_equivalence():
    cov = np.array([[0.10, 0.02, 0.01],
                    [0.02, 0.08, 0.03],
                    [0.01, 0.03, 0.12]])
    prob = problems.PortfolioProblem(cov, risk_weight=2.0)
    zeta = np.array([[1.0, 0.8, 1.3],
                     [0.5, 1.1, 0.7]])
    X, F, info = solvers.solve_portfolio_oracle(prob, zeta)
    # scipy SLSQP frozen: x* = [0.175, 0, 0.825], f* = 1.07225 / [0,1,0], 0.94
    np.testing.assert_allclose(X[0], [0.175, 0.0, 0.825], atol=1e-6)
    np.testing.assert_allclose(F, [1.07225, 0.94], atol=1e-8)
    assert info["status"] == "converged"

    rng = np.random.default_rng(3)
    Z = rng.uniform(0.2, 2.0, size=(20, 3))
    _, Fr, _ = solvers.solve_portfolio_oracle(prob, Z)
    for z, f in zip(Z, Fr):
        assert abs(f - _portfolio_grid_best(cov, 2.0, z)) < 1e-3


def test_portfolio_oracle_kkt_certificate():
    prob, zeta = problems.generate_portfolio_data(10, 3, 64, seed=2)
    X, F, info = solvers.solve_portfolio_oracle(prob, zeta)
    assert info["kkt_residual"] <= 1e-8
    np.testing.assert_allclose(X.sum(axis=1), 1.0, atol=1e-12)
    assert X.min() >= -1e-12


def test_toy2d_oracle_frozen_values():
    prob = problems.Toy2DProblem()
    X, F, info = solvers.solve_toy2d_oracle(prob, np.array([[1.0, 3.0],
                                                            [2.5, 1.2]]))
    np.testing.assert_allclose(X[0], [1 / 6, 0.3 - 1 / 6], atol=1e-10)
    np.testing.assert_allclose(X[1], [0.1, 0.2], atol=1e-10)
    np.testing.assert_allclose(F, [0.081111111111, 0.073], atol=1e-9)
    # feasible for the triangle
    assert (X @ prob.G.T - prob.h).max() < 1e-12


def _grid_min_2d(prob, z, span=3 * np.pi, pts=601):
    ticks = np.linspace(-span, span, pts)
    Xg, Yg = np.meshgrid(ticks, ticks)
    P = np.column_stack([Xg.ravel(), Yg.ravel()])
    feas = (P @ prob.G.T - prob.h <= 1e-9).all(axis=1)
    if prob.A.shape[0]:
        feas &= np.abs(P @ prob.A.T - prob.b).max(axis=1) < 0.05
    P = P[feas]
    vals = prob.objective(P, np.repeat(z[None, :], len(P), axis=0))
    return P[vals.argmin()], vals.min()


def test_nonconvex_oracle_matches_2d_grid():
    from scipy import optimize
    for seed in range(10):
        prob = problems.generate_nonconvex_instance(2, 0, 3, seed=seed)
        z = np.random.default_rng(100 + seed).uniform(0.0, 2.0, size=2)
        x0, _ = _grid_min_2d(prob, z)
        # polish the grid point with an independent local solver
        res = optimize.minimize(
            lambda x: 0.5 * x @ prob.Q @ x + z @ np.sin(x), x0, method="SLSQP",
            constraints=[{"type": "ineq", "fun": lambda x: prob.h - prob.G @ x}],
            options={"ftol": 1e-14, "maxiter": 300})
        X, F, _ = solvers.solve_nonconvex_oracle(prob, z[None, :], restarts=24,
                                                 tol=1e-9, step0=0.05, seed=0)
        assert F[0] <= res.fun + 1e-3


def test_nonconvex_oracle_never_beats_by_infeasibility():
    prob = problems.generate_nonconvex_instance(6, 3, 3, seed=4)
    Z = np.random.default_rng(5).uniform(0.0, 2.0, size=(16, 6))
    step0 = nonconvex_oracle_step(prob, Z)
    X, F, _ = solvers.solve_nonconvex_oracle(prob, Z, restarts=8, tol=1e-8,
                                             step0=step0, seed=0)
    assert np.abs(X @ prob.A.T - prob.b).max() < 1e-7
    assert (X @ prob.G.T - prob.h).max() < 1e-7
    # multistart must do at least as well as the witness from every sample
    fw = prob.objective(np.repeat(prob.witness[None, :], len(Z), axis=0), Z)
    assert (F <= fw + 1e-9).all()


def test_polytope_projector_returns_nearest_feasible_point():
    rng = np.random.default_rng(6)
    prob = problems.generate_nonconvex_instance(5, 2, 4, seed=7)
    proj = solvers.PolytopeProjector(prob.A, prob.b, prob.G, prob.h)
    pts = rng.normal(scale=2.0, size=(32, 5))
    out, _ = proj.project(pts)
    assert np.abs(out @ prob.A.T - prob.b).max() < 1e-6
    assert (out @ prob.G.T - prob.h).max() < 1e-6
    # projection optimality: <p - proj(p), y - proj(p)> <= 0 for feasible y
    for y in (prob.witness, out[0], out[5]):
        inner = np.einsum("bi,bi->b", pts - out, y[None, :] - out)
        assert inner.max() < 1e-5


def test_project_polytope_wrapper_matches_projector():
    prob = problems.generate_nonconvex_instance(4, 1, 3, seed=8)
    pts = np.random.default_rng(9).normal(size=(6, 4))
    a = solvers.project_polytope(pts, A=prob.A, b=prob.b, G=prob.G, h=prob.h)
    proj = solvers.PolytopeProjector(prob.A, prob.b, prob.G, prob.h)
    b_, _ = proj.project(pts)
    np.testing.assert_allclose(a, b_, atol=1e-8)


def test_divergence_error_is_a_runtime_error():
    with pytest.raises(RuntimeError):
        raise solvers.DivergenceError("boom")
