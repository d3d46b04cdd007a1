"""Training procedures: three feature-to-solution trainers plus baselines.

The feature-to-solution trainers share one mini-batch Adam loop and differ
only in the loss and in per-epoch bookkeeping:

* LD: supervised distance to oracle targets plus multiplier-weighted
  violations, with dual-ascent multiplier updates.
* PDL: self-supervised augmented Lagrangian with a second network
  predicting instance-wise multipliers, and an outer penalty schedule.
* DC3: equality completion of a reduced prediction plus unrolled gradient
  corrections of inequality violations.

Baselines: a two-stage regression model (MSE on parameters, solved
downstream by an oracle) and an end-to-end predictor trained through a
frozen pretrained proxy.
"""

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import nn
from . import solvers
from .ioutil import atomic_write_text
from .problems import percentage_regret, regret, violation


class MissingOracleError(ValueError):
    """Raised when a method needs precomputed oracle targets that are absent."""


class TrainHistory:
    """Per-epoch training trace; columns that never get a value are dropped."""

    COLUMNS = ("epoch", "loss", "train_regret_pct", "test_regret_pct",
               "test_mse", "violation_pre", "mult_norm", "rho")

    def __init__(self):
        self.rows = []
        self.early_stop_epoch = None
        self.stopped_epoch = None

    def record(self, epoch, **values):
        row = {"epoch": epoch}
        row.update(values)
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows if name in r])

    def save_csv(self, path):
        cols = [c for c in self.COLUMNS if any(c in r for r in self.rows)]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join("%.12g" % r[c] if c in r else "" for c in cols))
        lines.append(f"# early_stop_epoch={self.early_stop_epoch} "
                     f"stopped_epoch={self.stopped_epoch}")
        atomic_write_text(path, "\n".join(lines) + "\n")


class _EarlyStopper:
    """Keep the best snapshot of a model by a to-minimize metric."""

    def __init__(self, model, patience):
        self.model = model
        self.patience = patience
        self.best = np.inf
        self.best_epoch = None
        self.snapshot = nn.snapshot(model)
        self.stale = 0

    def update(self, metric, epoch):
        """Returns True when training should stop."""
        if metric < self.best:
            self.best = metric
            self.best_epoch = epoch
            self.snapshot = nn.snapshot(self.model)
            self.stale = 0
            return False
        self.stale += 1
        return self.stale > self.patience

    def restore(self):
        nn.restore(self.model, self.snapshot)


def _batches(n, batch_size, rng):
    """Shuffled full batches; a trailing partial batch is dropped."""
    order = rng.permutation(n)
    if n <= batch_size:
        yield order
        return
    n_full = n // batch_size
    for i in range(n_full):
        yield order[i * batch_size:(i + 1) * batch_size]


def _penalty_terms_graph(tape, problem, x):
    """(relu(g), h) residual Vars for the batch, either possibly None."""
    g = problem.ineq_residuals_graph(tape, x) if problem.n_ineq else None
    h = problem.eq_residuals_graph(tape, x) if problem.n_eq else None
    return (None if g is None else ad.relu(g)), h


# ---------------------------------------------------------------------------
# LD


class LdState:
    """Problem-level multipliers for the dual-ascent loss."""

    def __init__(self, n_ineq, n_eq, lambda0=0.1, mu0=0.5,
                 step_size=200.0, updating_epochs=1e-3, update_period=5):
        self.lam = np.full(n_ineq, float(lambda0))
        self.mu = np.full(n_eq, float(mu0))
        # the two grid constants enter only through their product
        self.step = float(step_size) * float(updating_epochs)
        self.update_period = int(update_period)


def ld_loss(tape, x_hat, x_star, problem, state):
    """Batch mean of ||x_hat - x*||^2 + lam'[g]_+ + mu'h."""
    if x_star is None:
        raise MissingOracleError("LD needs oracle targets x_star")
    diff = x_hat - ad.constant(tape, np.atleast_2d(x_star))
    per_sample = ad.reduce_sum(ad.square(diff), axis=1)
    gp, h = _penalty_terms_graph(tape, problem, x_hat)
    if gp is not None:
        per_sample = per_sample + ad.reduce_sum(gp * ad.constant(tape, state.lam), axis=1)
    if h is not None:
        per_sample = per_sample + ad.reduce_sum(h * ad.constant(tape, state.mu), axis=1)
    return ad.reduce_mean(per_sample)


def ld_multiplier_update(state, mean_ineq_violation, mean_eq_residual):
    """Dual ascent: lam += s*mean([g]_+), mu += s*mean(h); lam stays >= 0."""
    state.lam = state.lam + state.step * np.asarray(mean_ineq_violation)
    state.mu = state.mu + state.step * np.asarray(mean_eq_residual)
    return state


# ---------------------------------------------------------------------------
# PDL


class PdlState:
    """Penalty schedule plus per-train-instance multiplier targets."""

    def __init__(self, n_train, n_ineq, n_eq, rho=0.5, rho_max=5000.0,
                 alpha=5.0, tau=0.8):
        self.rho = float(rho)
        self.rho_max = float(rho_max)
        self.alpha = float(alpha)
        self.tau = float(tau)
        self.lam_targets = np.zeros((n_train, n_ineq))
        self.mu_targets = np.zeros((n_train, n_eq))
        self.prev_max_violation = np.inf


def pdl_primal_loss(tape, x_hat, zeta, lam_hat, mu_hat, rho, problem):
    """Augmented Lagrangian, sense-adjusted: f + lam'g + mu'h + rho/2 * penalties.

    lam_hat is clipped nonnegative here as well as at target updates.
    """
    f = problem.objective_graph(tape, x_hat, zeta)
    per_sample = ad.constant(tape, problem.sense_sign) * f
    g = problem.ineq_residuals_graph(tape, x_hat) if problem.n_ineq else None
    h = problem.eq_residuals_graph(tape, x_hat) if problem.n_eq else None
    penalty = None
    if g is not None:
        lam = ad.relu(lam_hat) if isinstance(lam_hat, ad.Var) else \
            ad.constant(tape, np.maximum(np.atleast_2d(lam_hat), 0.0))
        per_sample = per_sample + ad.reduce_sum(lam * g, axis=1)
        penalty = ad.reduce_sum(ad.square(ad.relu(g)), axis=1)
    if h is not None:
        mu = mu_hat if isinstance(mu_hat, ad.Var) else ad.constant(tape, np.atleast_2d(mu_hat))
        per_sample = per_sample + ad.reduce_sum(mu * h, axis=1)
        eq_pen = ad.reduce_sum(ad.square(h), axis=1)
        penalty = eq_pen if penalty is None else penalty + eq_pen
    if penalty is not None:
        per_sample = per_sample + ad.constant(tape, 0.5 * rho) * penalty
    return ad.reduce_mean(per_sample)


def pdl_outer_update(state, problem, x_hat_train):
    """Multiplier-target and penalty updates after one outer iteration.

    Targets move by rho times the residuals at the current predictions
    (inequality targets clipped at zero); rho grows by alpha, capped at
    rho_max, whenever the worst violation failed to shrink by factor tau.
    """
    g = problem.ineq_residuals(x_hat_train) if problem.n_ineq else None
    h = problem.eq_residuals(x_hat_train) if problem.n_eq else None
    worst = 0.0
    if g is not None:
        state.lam_targets = np.maximum(0.0, state.lam_targets + state.rho * g)
        worst = max(worst, float(np.maximum(g, 0.0).max()))
    if h is not None:
        state.mu_targets = state.mu_targets + state.rho * h
        worst = max(worst, float(np.abs(h).max()) if h.size else 0.0)
    if worst > state.tau * state.prev_max_violation:
        state.rho = min(state.alpha * state.rho, state.rho_max)
    state.prev_max_violation = worst
    return state


# ---------------------------------------------------------------------------
# DC3


def dc3_partition(A):
    """Split variables into (predicted, completed) so A_completed is invertible.

    Column-pivoted QR picks the best-conditioned n_eq columns for the
    completed block; the submatrix condition number is returned for logging.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n_eq, n = A.shape
    _, _, piv = scipy.linalg.qr(A, pivoting=True)
    comp = np.sort(piv[:n_eq])
    pred = np.sort(piv[n_eq:])
    cond = float(np.linalg.cond(A[:, comp]))
    return pred, comp, cond


class Dc3Completion:
    """Affine completion map x = x_p @ M + c with A x = b for any x_p."""

    def __init__(self, A, b, partition=None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        if partition is None:
            pred, comp, cond = dc3_partition(A)
        else:
            pred, comp = (np.asarray(p, dtype=int) for p in partition)
            cond = float(np.linalg.cond(A[:, comp]))
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"completion submatrix numerically singular (cond {cond:.2e})")
        self.pred, self.comp, self.cond = pred, comp, cond
        n = A.shape[1]
        A_c, A_p = A[:, comp], A[:, pred]
        T = -np.linalg.solve(A_c, A_p)               # d x_c / d x_p
        c0 = np.linalg.solve(A_c, b)
        Sp = np.zeros((len(pred), n))
        Sp[np.arange(len(pred)), pred] = 1.0
        Sc = np.zeros((len(comp), n))
        Sc[np.arange(len(comp)), comp] = 1.0
        self.M = Sp + T.T @ Sc                       # (n_pred, n)
        self.c = c0 @ Sc                             # (n,)
        self.T = T

    def complete(self, x_p):
        return np.atleast_2d(x_p) @ self.M + self.c

    def complete_graph(self, tape, x_p):
        return ad.matmul(x_p, ad.constant(tape, self.M)) + ad.constant(tape, self.c)


def dc3_complete(x_partial, A, b, partition=None):
    """Fill the completed coordinates so the equalities hold exactly."""
    comp = Dc3Completion(A, b, partition)
    out = comp.complete(x_partial)
    return out[0] if np.asarray(x_partial).ndim == 1 else out


def dc3_correct(x, G, h, A, steps, gamma, partition=None, b=None):
    """Gradient steps on ||[Gx-h]_+||^2 inside the equality manifold.

    Steps move only the predicted block (through the completion map), so
    Ax = b is preserved; any step that would increase the batch violation
    halves gamma and retries, keeping the violation non-increasing.
    Returns (x_corrected, gamma_used).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if A is None:
        M = np.eye(x.shape[1])
        x_p = x.copy()
        rebuild = lambda xp: xp
    else:
        comp = Dc3Completion(A, x[0] @ np.atleast_2d(A).T if b is None else b, partition)
        M = comp.M
        x_p = x[:, comp.pred].copy()
        rebuild = comp.complete
    K = G @ M.T                                      # violation gradient wrt x_p
    cur = rebuild(x_p)
    for _ in range(int(steps)):
        for _try in range(30):
            gp = np.maximum(cur @ G.T - h, 0.0)
            cand_p = x_p - gamma * 2.0 * (gp @ K)
            cand = rebuild(cand_p)
            v_new = np.maximum(cand @ G.T - h, 0.0).sum()
            if v_new <= gp.sum() + 1e-15:
                x_p, cur = cand_p, cand
                break
            gamma *= 0.5
    return cur, gamma


def _dc3_correct_graph(tape, x_p, completion, problem, steps, gamma_box):
    """Unrolled on-tape corrections; gamma_box carries the shared step size.

    Each candidate step is checked numerically; increases halve gamma and
    retry so the recorded graph only contains violation-non-increasing
    steps.  Returns the corrected full decision Var.
    """
    K2 = ad.constant(tape, 2.0 * (problem.G @ completion.M.T))   # (n_ineq, n_pred)
    x = completion.complete_graph(tape, x_p)
    for _ in range(int(steps)):
        v_old = np.maximum(problem.ineq_residuals(x.value), 0.0).sum()
        for _try in range(30):
            gp = ad.relu(problem.ineq_residuals_graph(tape, x))
            cand_p = x_p - ad.constant(tape, gamma_box["gamma"]) * ad.matmul(gp, K2)
            cand = completion.complete_graph(tape, cand_p)
            v_new = np.maximum(problem.ineq_residuals(cand.value), 0.0).sum()
            if v_new <= v_old + 1e-15:
                x_p, x = cand_p, cand
                break
            gamma_box["gamma"] *= 0.5
    return x


def dc3_loss(tape, x, zeta, problem, lam=7.5, mu=2.5):
    """Sense-adjusted f plus squared-violation penalties."""
    f = problem.objective_graph(tape, x, zeta)
    per_sample = ad.constant(tape, problem.sense_sign) * f
    if problem.n_ineq:
        gp = ad.relu(problem.ineq_residuals_graph(tape, x))
        per_sample = per_sample + ad.constant(tape, lam) * ad.reduce_sum(ad.square(gp), axis=1)
    if problem.n_eq:
        h = problem.eq_residuals_graph(tape, x)
        per_sample = per_sample + ad.constant(tape, mu) * ad.reduce_sum(ad.square(h), axis=1)
    return ad.reduce_mean(per_sample)


# ---------------------------------------------------------------------------
# pipelines: how a trained model turns features into decisions


class DirectPipeline:
    """x_hat = model(z); the LD and PDL deployment path."""

    def __init__(self, model):
        self.model = model

    def predict(self, z):
        self.model.eval()
        return nn.forward(self.model, np.atleast_2d(z))


class Dc3Pipeline:
    """x_hat = correct(complete(model(z))) with the test-time step count."""

    def __init__(self, model, completion, problem, t_test, gamma):
        self.model = model
        self.completion = completion
        self.problem = problem
        self.t_test = t_test
        self.gamma = gamma

    def predict(self, z):
        self.model.eval()
        x_p = nn.forward(self.model, np.atleast_2d(z))
        x = self.completion.complete(x_p)
        if self.t_test and self.problem.n_ineq:
            x, _ = _dc3_correct_eval(x_p, self.completion, self.problem,
                                     self.t_test, self.gamma)
        return x


def _dc3_correct_eval(x_p, completion, problem, steps, gamma):
    K = problem.G @ completion.M.T
    x = completion.complete(x_p)
    for _ in range(int(steps)):
        v_old = np.maximum(problem.ineq_residuals(x), 0.0).sum()
        for _try in range(30):
            gp = np.maximum(problem.ineq_residuals(x), 0.0)
            cand_p = x_p - gamma * 2.0 * (gp @ K)
            cand = completion.complete(cand_p)
            v_new = np.maximum(problem.ineq_residuals(cand), 0.0).sum()
            if v_new <= v_old + 1e-15:
                x_p, x = cand_p, cand
                break
            gamma *= 0.5
    return x, gamma


class TwoStagePipeline:
    """zeta_hat = model(z), then an oracle solve supplies the decision."""

    def __init__(self, model, solve_fn):
        self.model = model
        self.solve_fn = solve_fn

    def predict_params(self, z):
        self.model.eval()
        return nn.forward(self.model, np.atleast_2d(z))

    def predict(self, z):
        x, _, _ = self.solve_fn(self.predict_params(z))
        return x


class ProxyPipeline:
    """x_hat = frozen_proxy(predictor(z))."""

    def __init__(self, predictor, proxy):
        self.predictor = predictor
        self.proxy = proxy

    def predict(self, z):
        self.predictor.eval()
        self.proxy.eval()
        zeta_hat = nn.forward(self.predictor, np.atleast_2d(z))
        return nn.forward(self.proxy, zeta_hat)


# ---------------------------------------------------------------------------
# shared evaluation-during-training helper


class _RegretEvaluator:
    """Percentage regret after restoration, reused across epochs.

    Restoration is clip-normalize on the simplex and a warm-started
    polytope projection elsewhere; f_star comes from the oracle cache.
    """

    def __init__(self, problem, restore_kind):
        self.problem = problem
        self.kind = restore_kind
        if restore_kind == "polytope":
            self.projector = solvers.PolytopeProjector(
                problem.A, problem.b, problem.G, problem.h, tol=1e-8)
            self.warm = {}

    def restore(self, x_hat, tag="default"):
        if self.kind == "simplex":
            return solvers.clip_normalize(x_hat)
        warm = self.warm.get(tag)
        if warm is not None and warm[0].shape[1] != np.atleast_2d(x_hat).shape[0]:
            warm = None
        out, state = self.projector.project(x_hat, warm=warm)
        self.warm[tag] = state
        return out

    def pct_regret(self, x_hat, zeta, f_star, tag="default"):
        x_rest = self.restore(x_hat, tag=tag)
        r = regret(self.problem, x_rest, zeta, f_star)
        return float(percentage_regret(r, f_star).mean())


def restore_kind_for(problem):
    # simplex problems restore by clip-normalize, everything else projects
    if problem.A is not None and problem.A.shape[0] == 1 \
            and np.allclose(problem.A, 1.0) and problem.G is not None \
            and np.allclose(problem.G, -np.eye(problem.n)):
        return "simplex"
    return "polytope"


# ---------------------------------------------------------------------------
# trainers


def _new_model(in_dim, out_dim, hidden_width, n_hidden, seed, dropout, batchnorm):
    dims = [in_dim] + [hidden_width] * n_hidden + [out_dim]
    return nn.init_mlp(dims, rng=np.random.default_rng([seed, 0]),
                       dropout_rate=dropout, batchnorm=batchnorm)


def train_ltof(method, dataset, problem, seed, hidden_width=500, n_hidden=2,
               epochs=200, batch_size=200, lr=1e-4, dropout=0.1, batchnorm=True,
               patience=20, eval_every=1, train_eval_cap=512,
               method_params=None, history=None):
    """Train a feature-to-solution model with the chosen procedure.

    method is "ld", "pdl", or "dc3".  Early stopping tracks test-set
    percentage regret after restoration and the best snapshot is restored
    before returning.  Returns (pipeline, history).

    Raises nn.DivergenceError (history attached) if the loss stops being
    finite.
    """
    if method not in ("ld", "pdl", "dc3"):
        raise ValueError(f"unknown method {method!r}")
    mp = dict(method_params or {})
    history = history or TrainHistory()
    rng_batch = np.random.default_rng([seed, 1])
    rng_drop = np.random.default_rng([seed, 2])

    tr, te = dataset.train_idx, dataset.test_idx
    z_tr, zeta_tr = dataset.z[tr], dataset.zeta[tr]
    z_te, zeta_te = dataset.z[te], dataset.zeta[te]
    if dataset.f_star is None:
        raise MissingOracleError("dataset lacks oracle values needed for regret evaluation")
    f_te = dataset.f_star[te]
    evaluator = _RegretEvaluator(problem, restore_kind_for(problem))
    # cap the per-epoch train-regret pass on big sets; fixed prefix, so the
    # logged series is comparable across epochs
    tr_eval = np.arange(len(tr))[:train_eval_cap]

    if method == "dc3":
        if problem.n_eq == 0:
            raise ValueError("dc3 needs equality constraints to complete")
        completion = Dc3Completion(problem.A, problem.b, mp.get("partition"))
        out_dim = problem.n - problem.n_eq
    else:
        completion = None
        out_dim = problem.n
    model = _new_model(dataset.z.shape[1], out_dim, hidden_width,
                       n_hidden=n_hidden, seed=seed, dropout=dropout, batchnorm=batchnorm)
    adam = nn.AdamState(nn.parameters(model), lr=lr)
    stopper = _EarlyStopper(model, patience)

    ld_state = pdl_state = None
    gamma_box = {"gamma": mp.get("gamma", 1e-4)}
    t_train = int(mp.get("t_train", 5))
    t_test = int(mp.get("t_test", 5))
    dc3_lam, dc3_mu = _dc3_weights(mp)
    if method == "ld":
        if dataset.x_star is None:
            raise MissingOracleError("LD needs an oracle cache with x_star targets")
        ld_state = LdState(problem.n_ineq, problem.n_eq,
                           lambda0=mp.get("lambda0", 0.1), mu0=mp.get("mu0", 0.5),
                           step_size=mp.get("step_size", 200.0),
                           updating_epochs=mp.get("updating_epochs", 1e-3),
                           update_period=mp.get("update_period", 5))
        x_star_tr = dataset.x_star[tr]
    if method == "pdl":
        pdl_state = PdlState(len(tr), problem.n_ineq, problem.n_eq,
                             rho=mp.get("rho", 0.5), rho_max=mp.get("rho_max", 5000.0),
                             alpha=mp.get("alpha", 5.0), tau=mp.get("tau", 0.8))
        dual_model = _new_model(dataset.z.shape[1], problem.n_ineq + problem.n_eq,
                                hidden_width, n_hidden=n_hidden, seed=seed + 7919,
                                dropout=0.0, batchnorm=False)
        dual_adam = nn.AdamState(nn.parameters(dual_model), lr=lr)
        inner_primal = int(mp.get("inner_primal", 10))
        inner_dual = int(mp.get("inner_dual", 5))
        # nonnegativity applies only to the inequality columns of the dual head
        dual_mask = np.concatenate([np.ones(problem.n_ineq), np.zeros(problem.n_eq)])

    def predict_train_eval():
        model.eval()
        if method == "dc3":
            x_p = nn.forward(model, z_tr[tr_eval])
            x, _ = _dc3_correct_eval(x_p, completion, problem, t_test, gamma_box["gamma"])
            return x
        return nn.forward(model, z_tr[tr_eval])

    def predict_test():
        model.eval()
        if method == "dc3":
            x_p = nn.forward(model, z_te)
            x, _ = _dc3_correct_eval(x_p, completion, problem, t_test, gamma_box["gamma"])
            return x
        return nn.forward(model, z_te)

    def run_epoch(epoch):
        model.train()
        losses = []
        for idx in _batches(len(tr), batch_size, rng_batch):
            tape = ad.Tape()
            out, pvars = nn.forward_graph(model, tape, z_tr[idx], rng=rng_drop)
            if method == "ld":
                loss = ld_loss(tape, out, x_star_tr[idx], problem, ld_state)
            elif method == "pdl":
                dual_model.eval()
                duals = nn.forward(dual_model, z_tr[idx])
                lam_hat = np.maximum(duals[:, :problem.n_ineq], 0.0)
                mu_hat = duals[:, problem.n_ineq:]
                loss = pdl_primal_loss(tape, out, zeta_tr[idx], lam_hat, mu_hat,
                                       pdl_state.rho, problem)
            else:
                x = _dc3_correct_graph(tape, out, completion, problem,
                                       t_train, gamma_box)
                loss = dc3_loss(tape, x, zeta_tr[idx], problem, dc3_lam, dc3_mu)
            lv = float(loss.value)
            if not np.isfinite(lv):
                history.stopped_epoch = epoch
                err = nn.DivergenceError(f"non-finite loss at epoch {epoch}")
                err.history = history
                raise err
            grads = ad.backward(tape, loss)
            nn.adam_step(adam, model, [ad.grad_of(grads, p) for p in pvars])
            losses.append(lv)
        return float(np.mean(losses)) if losses else np.nan

    epoch = 0
    for epoch in range(1, epochs + 1):
        mean_loss = run_epoch(epoch)

        if method == "ld" and epoch % ld_state.update_period == 0:
            model.eval()
            x_hat = nn.forward(model, z_tr)
            mean_gv = np.maximum(problem.ineq_residuals(x_hat), 0.0).mean(axis=0) \
                if problem.n_ineq else np.zeros(0)
            mean_h = problem.eq_residuals(x_hat).mean(axis=0) if problem.n_eq else np.zeros(0)
            ld_multiplier_update(ld_state, mean_gv, mean_h)

        if method == "pdl" and epoch % inner_primal == 0:
            model.eval()
            x_hat = nn.forward(model, z_tr)
            pdl_outer_update(pdl_state, problem, x_hat)
            targets = np.hstack([pdl_state.lam_targets, pdl_state.mu_targets])
            for _ in range(inner_dual):
                for idx in _batches(len(tr), batch_size, rng_batch):
                    dual_model.train()
                    tape = ad.Tape()
                    dout, dvars = nn.forward_graph(dual_model, tape, z_tr[idx], rng=rng_drop)
                    m = ad.constant(tape, dual_mask)
                    mapped = ad.relu(dout) * m + dout * (ad.constant(tape, 1.0 - dual_mask))
                    diff = mapped - ad.constant(tape, targets[idx])
                    dloss = ad.reduce_mean(ad.reduce_sum(ad.square(diff), axis=1))
                    dgrads = ad.backward(tape, dloss)
                    nn.adam_step(dual_adam, dual_model, [ad.grad_of(dgrads, p) for p in dvars])

        record = {"loss": mean_loss}
        if method == "ld":
            record["mult_norm"] = float(np.linalg.norm(np.concatenate([ld_state.lam, ld_state.mu])))
        if method == "pdl":
            record["rho"] = pdl_state.rho
            record["mult_norm"] = float(np.linalg.norm(pdl_state.lam_targets))
        if epoch % eval_every == 0:
            x_te_hat = predict_test()
            record["violation_pre"] = float(violation(problem, x_te_hat).mean())
            record["test_regret_pct"] = evaluator.pct_regret(x_te_hat, zeta_te, f_te, tag="test")
            x_tr_hat = predict_train_eval()
            if dataset.f_star is not None:
                record["train_regret_pct"] = evaluator.pct_regret(
                    x_tr_hat, zeta_tr[tr_eval], dataset.f_star[tr][tr_eval], tag="train")
            history.record(epoch, **record)
            if stopper.update(record["test_regret_pct"], epoch):
                break
        else:
            history.record(epoch, **record)

    stopper.restore()
    history.early_stop_epoch = stopper.best_epoch
    history.stopped_epoch = epoch
    if method == "dc3":
        pipeline = Dc3Pipeline(model, completion, problem, t_test, gamma_box["gamma"])
    else:
        pipeline = DirectPipeline(model)
    return pipeline, history


def _dc3_weights(mp):
    total = float(mp.get("penalty_total", 10.0))
    frac = float(mp.get("penalty_ineq_fraction", 0.75))
    return total * frac, total * (1.0 - frac)


def train_two_stage(dataset, problem, solve_fn, seed, n_hidden=2,
                    hidden_width=500, epochs=200, batch_size=200, lr=1e-4,
                    dropout=0.1, batchnorm=True, patience=20, eval_every=1):
    """Regression of parameters from features under MSE, early-stopped on MSE.

    The returned pipeline solves the problem downstream with `solve_fn`,
    which must map a batch of predicted parameters to (x, f, info).
    """
    history = TrainHistory()
    rng_batch = np.random.default_rng([seed, 1])
    rng_drop = np.random.default_rng([seed, 2])
    tr, te = dataset.train_idx, dataset.test_idx
    z_tr, zeta_tr = dataset.z[tr], dataset.zeta[tr]
    z_te, zeta_te = dataset.z[te], dataset.zeta[te]

    model = _new_model(dataset.z.shape[1], problem.param_dim, hidden_width,
                       n_hidden=n_hidden, seed=seed, dropout=dropout, batchnorm=batchnorm)
    adam = nn.AdamState(nn.parameters(model), lr=lr)
    stopper = _EarlyStopper(model, patience)

    epoch = 0
    for epoch in range(1, epochs + 1):
        model.train()
        losses = []
        for idx in _batches(len(tr), batch_size, rng_batch):
            tape = ad.Tape()
            out, pvars = nn.forward_graph(model, tape, z_tr[idx], rng=rng_drop)
            diff = out - ad.constant(tape, zeta_tr[idx])
            loss = ad.reduce_mean(ad.reduce_sum(ad.square(diff), axis=1))
            lv = float(loss.value)
            if not np.isfinite(lv):
                history.stopped_epoch = epoch
                err = nn.DivergenceError(f"non-finite loss at epoch {epoch}")
                err.history = history
                raise err
            grads = ad.backward(tape, loss)
            nn.adam_step(adam, model, [ad.grad_of(grads, p) for p in pvars])
            losses.append(lv)
        record = {"loss": float(np.mean(losses)) if losses else np.nan}
        if epoch % eval_every == 0:
            model.eval()
            pred = nn.forward(model, z_te)
            test_mse = float(((pred - zeta_te) ** 2).sum(axis=1).mean())
            record["test_mse"] = test_mse
            history.record(epoch, **record)
            if stopper.update(test_mse, epoch):
                break
        else:
            history.record(epoch, **record)

    stopper.restore()
    history.early_stop_epoch = stopper.best_epoch
    history.stopped_epoch = epoch
    return TwoStagePipeline(model, solve_fn), history


def pretrain_proxy(problem, zeta_samples, method, seed, x_star=None, f_star=None,
                   **train_kwargs):
    """Classic solution-proxy training: features ARE the parameters.

    Builds an in-memory dataset with z = zeta and delegates to train_ltof;
    the result maps parameter vectors to near-optimal decisions, valid on
    (roughly) the distribution zeta_samples was drawn from.
    """
    from .problems import PtoDataset, make_split
    zeta_samples = np.atleast_2d(zeta_samples)
    mask = make_split(len(zeta_samples), 0.1, seed)
    ds = PtoDataset(zeta_samples, zeta_samples, x_star=x_star, f_star=f_star,
                    test_mask=mask)
    pipeline, history = train_ltof(method, ds, problem, seed, **train_kwargs)
    return pipeline.model, history


def train_epo_with_frozen_proxy(dataset, proxy, problem, seed, n_hidden=2,
                                hidden_width=500, epochs=200, batch_size=200,
                                lr=1e-4, dropout=0.1, batchnorm=True,
                                patience=20, eval_every=1):
    """End-to-end training of a predictor through a frozen solution proxy.

    The proxy stays in inference mode the whole time: gradients flow
    through its weights into the predictor, but its parameters and running
    statistics never change.  Early stopping follows test percentage regret
    after restoration, like the other end-to-end methods.
    """
    history = TrainHistory()
    rng_batch = np.random.default_rng([seed, 1])
    rng_drop = np.random.default_rng([seed, 2])
    tr, te = dataset.train_idx, dataset.test_idx
    z_tr, zeta_tr = dataset.z[tr], dataset.zeta[tr]
    z_te, zeta_te = dataset.z[te], dataset.zeta[te]
    f_te = dataset.f_star[te]
    evaluator = _RegretEvaluator(problem, restore_kind_for(problem))

    predictor = _new_model(dataset.z.shape[1], problem.param_dim, hidden_width,
                           n_hidden=n_hidden, seed=seed, dropout=dropout,
                           batchnorm=batchnorm)
    adam = nn.AdamState(nn.parameters(predictor), lr=lr)
    stopper = _EarlyStopper(predictor, patience)
    proxy.eval()

    epoch = 0
    for epoch in range(1, epochs + 1):
        predictor.train()
        losses = []
        for idx in _batches(len(tr), batch_size, rng_batch):
            tape = ad.Tape()
            zeta_hat, pvars = nn.forward_graph(predictor, tape, z_tr[idx], rng=rng_drop)
            x_hat, _ = nn.forward_graph(proxy, tape, zeta_hat)
            f = problem.objective_graph(tape, x_hat, zeta_tr[idx])
            loss = ad.constant(tape, problem.sense_sign) * ad.reduce_mean(f)
            lv = float(loss.value)
            if not np.isfinite(lv):
                history.stopped_epoch = epoch
                err = nn.DivergenceError(f"non-finite loss at epoch {epoch}")
                err.history = history
                raise err
            grads = ad.backward(tape, loss)
            nn.adam_step(adam, predictor, [ad.grad_of(grads, p) for p in pvars])
            losses.append(lv)
        record = {"loss": float(np.mean(losses)) if losses else np.nan}
        if epoch % eval_every == 0:
            predictor.eval()
            x_te_hat = nn.forward(proxy, nn.forward(predictor, z_te))
            record["violation_pre"] = float(violation(problem, x_te_hat).mean())
            record["test_regret_pct"] = evaluator.pct_regret(x_te_hat, zeta_te, f_te, tag="test")
            history.record(epoch, **record)
            if stopper.update(record["test_regret_pct"], epoch):
                break
        else:
            history.record(epoch, **record)

    stopper.restore()
    history.early_stop_epoch = stopper.best_epoch
    history.stopped_epoch = epoch
    return ProxyPipeline(predictor, proxy), history
