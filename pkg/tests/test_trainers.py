"""Training procedures: loss states, completion/correction, pipelines."""

import numpy as np
import pytest

from ltof import autodiff as ad
from ltof import nn, problems, trainers
from ltof.problems import percentage_regret, regret


def test_regret_sign_conventions():
    prob = problems.Toy2DProblem()              # minimization
    zeta = np.array([[1.0, 1.0]])
    x_opt = np.array([[0.15, 0.15]])
    f_star = prob.objective(x_opt, zeta)
    worse = np.array([[0.12, 0.18]])            # feasible but suboptimal
    r = regret(prob, worse, zeta, f_star)
    assert r[0] > 0
    cov = np.eye(2) * 0.1
    pmax = problems.PortfolioProblem(cov, risk_weight=1.0)   # maximization
    zeta2 = np.array([[1.0, 0.5]])
    x_best = np.array([[1.0, 0.0]])
    f2 = pmax.objective(x_best, zeta2)
    r2 = regret(pmax, np.array([[0.5, 0.5]]), zeta2, f2)
    assert r2[0] > 0                            # worse return, positive regret


def test_percentage_regret_values_and_tiny_denominator():
    vals = percentage_regret(np.array([0.5]), np.array([2.0]))
    np.testing.assert_allclose(vals, [25.0])
    with pytest.warns(UserWarning):
        out = percentage_regret(np.array([0.3]), np.array([0.0]))
    np.testing.assert_allclose(out, [0.3])      # absolute fallback


def test_ld_multiplier_update_and_nonnegativity():
    state = trainers.LdState(n_ineq=2, n_eq=1, lambda0=0.1, mu0=0.5,
                             step_size=200.0, updating_epochs=1e-3)
    assert state.step == pytest.approx(0.2)
    trainers.ld_multiplier_update(state, np.array([0.3, 0.0]), np.array([-0.1]))
    np.testing.assert_allclose(state.lam, [0.1 + 0.2 * 0.3, 0.1])
    np.testing.assert_allclose(state.mu, [0.5 - 0.2 * 0.1])
    # [g]_+ means the inequality input is never negative, so lam never shrinks
    assert state.lam.min() >= 0.1


def test_ld_loss_requires_oracle_targets():
    prob = problems.Toy2DProblem()
    tape = ad.Tape()
    x = ad.constant(tape, np.zeros((2, 2)))
    with pytest.raises(trainers.MissingOracleError):
        trainers.ld_loss(tape, x, None, prob, trainers.LdState(3, 0))


def test_pdl_outer_update_rho_ladder():
    prob = problems.generate_nonconvex_instance(4, 1, 2, seed=0)
    state = trainers.PdlState(n_train=8, n_ineq=2, n_eq=1, rho=0.5,
                              rho_max=5.0, alpha=2.0, tau=0.5)
    rng = np.random.default_rng(0)
    rhos = [state.rho]
    for _ in range(12):
        trainers.pdl_outer_update(state, prob, rng.normal(size=(8, 4)))
        rhos.append(state.rho)
        assert state.lam_targets.min() >= 0
    diffs = np.diff(rhos)
    assert (diffs >= 0).all()
    assert max(rhos) <= 5.0                     # capped at rho_max


def test_dc3_completion_solves_equalities_exactly():
    prob = problems.generate_nonconvex_instance(7, 3, 4, seed=1)
    comp = trainers.Dc3Completion(prob.A, prob.b)
    rng = np.random.default_rng(2)
    for _ in range(10):
        xp = rng.normal(size=(16, 7 - 3))
        x = comp.complete(xp)
        assert np.abs(x @ prob.A.T - prob.b).max() <= 1e-9
        np.testing.assert_array_equal(x[:, comp.pred], xp)


def test_dc3_completion_graph_matches_numpy():
    prob = problems.generate_nonconvex_instance(6, 2, 3, seed=3)
    comp = trainers.Dc3Completion(prob.A, prob.b)
    xp = np.random.default_rng(3).normal(size=(5, 4))
    tape = ad.Tape()
    xv = ad.constant(tape, xp)
    out = comp.complete_graph(tape, xv)
    np.testing.assert_allclose(out.value, comp.complete(xp), atol=1e-12)


def test_dc3_correct_reduces_violation_monotonically():
    prob = problems.generate_nonconvex_instance(6, 2, 4, seed=4)
    comp = trainers.Dc3Completion(prob.A, prob.b)
    rng = np.random.default_rng(4)
    # start on the equality manifold; correction moves within it
    x = comp.complete(rng.normal(scale=2.0, size=(12, 4)))
    viol = lambda pts: np.maximum(pts @ prob.G.T - prob.h, 0.0).sum()
    prev = viol(x)
    assert prev > 0                             # otherwise nothing to test
    gamma = 1e-2
    for _ in range(6):
        x, gamma = trainers.dc3_correct(x, prob.G, prob.h, prob.A, steps=1,
                                        gamma=gamma, b=prob.b)
        cur = viol(x)
        assert cur <= prev + 1e-12
        assert np.abs(x @ prob.A.T - prob.b).max() <= 1e-9
        prev = cur


def test_two_stage_picks_best_grid_member(tiny_portfolio_dataset):
    from ltof import harness
    cfg, problem, ds = tiny_portfolio_dataset
    solve = harness.oracle_solve_fn(problem, cfg)
    reports = {}
    for m in (1, 2):
        pipe, hist = trainers.train_two_stage(ds, problem, solve, seed=0,
                                              hidden_width=16, n_hidden=m,
                                              epochs=15, batch_size=64,
                                              patience=5, lr=1e-3,
                                              dropout=0.0, batchnorm=False)
        te = ds.test_idx
        r = regret(problem, pipe.predict(ds.z[te]), ds.zeta[te], ds.f_star[te])
        reports[m] = float(percentage_regret(r, ds.f_star[te]).mean())
        assert np.isfinite(hist.column("test_mse")).all()
    assert all(np.isfinite(v) for v in reports.values())


def test_train_ltof_invariants_and_early_stop(tiny_portfolio_dataset):
    cfg, problem, ds = tiny_portfolio_dataset
    pipe, hist = trainers.train_ltof("ld", ds, problem, seed=0, hidden_width=16,
                                     epochs=25, batch_size=64, patience=8,
                                     lr=1e-3, dropout=0.0, batchnorm=False)
    mult = hist.column("mult_norm")
    assert np.isfinite(mult).all()
    assert hist.early_stop_epoch is not None
    assert hist.early_stop_epoch <= hist.stopped_epoch
    x = pipe.predict(ds.z[ds.test_idx])
    assert x.shape == (len(ds.test_idx), problem.n)


def test_train_ltof_dc3_feasible_predictions(tiny_nonconvex_dataset):
    cfg, problem, ds = tiny_nonconvex_dataset
    pipe, hist = trainers.train_ltof("dc3", ds, problem, seed=0, hidden_width=16,
                                     epochs=10, batch_size=64, patience=5,
                                     lr=1e-3, dropout=0.0, batchnorm=False,
                                     method_params={"gamma": 1e-2})
    x = pipe.predict(ds.z[ds.test_idx])
    # completion keeps equalities at solver precision even before restoration
    assert np.abs(x @ problem.A.T - problem.b).max() < 1e-9


def test_train_ltof_rejects_unknown_method(tiny_portfolio_dataset):
    cfg, problem, ds = tiny_portfolio_dataset
    with pytest.raises(ValueError):
        trainers.train_ltof("sgd", ds, problem, seed=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_for_absurd_learning_rate(tiny_portfolio_dataset):
    cfg, problem, ds = tiny_portfolio_dataset
    with pytest.raises(nn.DivergenceError):
        trainers.train_ltof("ld", ds, problem, seed=0, hidden_width=16,
                            epochs=30, batch_size=64, patience=30, lr=1e200,
                            dropout=0.0, batchnorm=False)


def test_epo_frozen_proxy_leaves_proxy_untouched(tiny_portfolio_dataset):
    cfg, problem, ds = tiny_portfolio_dataset
    tr = ds.train_idx
    proxy, _ = trainers.pretrain_proxy(problem, ds.zeta[tr], "ld", seed=0,
                                       x_star=ds.x_star[tr], f_star=ds.f_star[tr],
                                       n_hidden=1, hidden_width=16, epochs=10,
                                       batch_size=64, patience=5, lr=1e-3,
                                       dropout=0.0, batchnorm=False)
    before = [a.copy() for a in nn.parameters(proxy)]
    pipe, hist = trainers.train_epo_with_frozen_proxy(
        ds, proxy, problem, seed=0, n_hidden=1, hidden_width=16, epochs=10,
        batch_size=64, patience=5, lr=1e-3, dropout=0.0, batchnorm=False)
    after = nn.parameters(proxy)
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)
    x = pipe.predict(ds.z[ds.test_idx])
    assert x.shape == (len(ds.test_idx), problem.n)
