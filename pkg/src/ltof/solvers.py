"""Oracle solvers and feasibility projections.

All solvers are batched: a batch of right-hand sides or parameter vectors is
processed as columns of one matrix, which keeps the per-sample cost low on a
single core.  The convex QP solver is an operator-splitting (ADMM) method
with an active-set polish step that tightens KKT residuals well past the
splitting tolerance.
"""

import warnings

import numpy as np
import scipy.linalg


class DivergenceError(RuntimeError):
    """Raised when an iteration (solver or training) stops being finite."""


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort and threshold).

    Accepts a vector or a (batch, D) array.  The result is renormalized at
    the end so the coordinates sum to 1 exactly in floating point.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = np.atleast_2d(v)
    D = V.shape[1]
    U = np.sort(V, axis=1)[:, ::-1]
    css = np.cumsum(U, axis=1) - 1.0
    j = np.arange(1, D + 1)
    cond = U - css / j > 0
    rho = D - 1 - np.argmax(cond[:, ::-1], axis=1)   # last True index per row
    theta = css[np.arange(V.shape[0]), rho] / (rho + 1)
    X = np.maximum(V - theta[:, None], 0.0)
    X /= X.sum(axis=1, keepdims=True)
    return X[0] if single else X


def clip_normalize(v):
    """Cheap simplex restoration: clip negatives, divide by the sum.

    Rows with no positive entry fall back to the uniform point (with a
    warning) since the normalization is undefined there.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = np.maximum(np.atleast_2d(v), 0.0)
    sums = V.sum(axis=1)
    dead = sums <= 0.0
    if np.any(dead):
        warnings.warn(f"clip_normalize: {int(dead.sum())} all-nonpositive rows, using uniform")
        V[dead] = 1.0
        sums[dead] = V.shape[1]
    X = V / sums[:, None]
    return X[0] if single else X


class QpSolution:
    """Primal/dual result of one convex QP solve."""

    def __init__(self, x, lambda_eq, lambda_ineq, status, primal_residual,
                 dual_residual, iterations, polished=False):
        self.x = x
        self.lambda_eq = lambda_eq
        self.lambda_ineq = lambda_ineq
        self.status = status
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual
        self.iterations = iterations
        self.polished = polished


def _stack_constraints(A, b, G, h, n):
    rows, lo, hi, n_eq = [], [], [], 0
    if A is not None:
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        rows.append(A)
        lo.append(b)
        hi.append(b)
        n_eq = A.shape[0]
    if G is not None:
        G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        h = np.atleast_1d(np.asarray(h, dtype=np.float64))
        rows.append(G)
        lo.append(np.full(G.shape[0], -np.inf))
        hi.append(h)
    if not rows:
        raise ValueError("no constraints given")
    C = np.vstack(rows)
    if C.shape[1] != n:
        raise ValueError(f"constraint width {C.shape[1]} does not match n={n}")
    return C, np.concatenate(lo), np.concatenate(hi), n_eq


class _BoxAdmm:
    """ADMM core for min 1/2 x'Px + q'x  s.t.  l <= Cx <= u, batched over q.

    Scalar penalty per constraint row (equality rows get a stiffer penalty),
    over-relaxation, and periodic residual-balancing updates of the penalty
    with cached refactorization.
    """

    def __init__(self, P, C, lo, hi, n_eq, sigma=1e-6, rho=1.0, alpha=1.6):
        self.P = P
        self.C = C
        self.lo = lo[:, None]
        self.hi = hi[:, None]
        self.n_eq = n_eq
        self.sigma = sigma
        self.alpha = alpha
        self.base_rho = rho
        self._set_rho(rho)

    def _set_rho(self, rho):
        self.rho = rho
        rv = np.full(self.C.shape[0], rho)
        rv[:self.n_eq] *= 1e3          # equalities held much tighter
        self.rho_vec = rv[:, None]
        K = self.P + self.sigma * np.eye(self.P.shape[0]) + self.C.T @ (rv[:, None] * self.C)
        self.chol = scipy.linalg.cho_factor(K)

    def solve(self, Q, tol=1e-6, max_iter=20000, warm=None, adapt_every=100):
        """Q holds one q per column; returns (X, Z, Y, iters, pri, dua, status)."""
        n, m = self.P.shape[0], self.C.shape[0]
        B = Q.shape[1]
        if warm is None:
            X, Z, Y = np.zeros((n, B)), np.zeros((m, B)), np.zeros((m, B))
        else:
            X, Z, Y = (a.copy() for a in warm)
        status = "max_iter"
        it = 0
        pri = dua = np.inf
        for it in range(1, max_iter + 1):
            rhs = self.sigma * X - Q + self.C.T @ (self.rho_vec * Z - Y)
            Xt = scipy.linalg.cho_solve(self.chol, rhs)
            Zt = self.C @ Xt
            X = self.alpha * Xt + (1.0 - self.alpha) * X
            Zr = self.alpha * Zt + (1.0 - self.alpha) * Z
            Z = np.clip(Zr + Y / self.rho_vec, self.lo, self.hi)
            Y = Y + self.rho_vec * (Zr - Z)
            if it % 10 == 0 or it == max_iter:
                CX = self.C @ X
                pri = np.abs(CX - Z).max()
                dua = np.abs(self.P @ X + Q + self.C.T @ Y).max()
                if pri < tol and dua < tol:
                    status = "converged"
                    break
                if not np.isfinite(pri) or np.abs(X).max() > 1e12:
                    status = "diverged"
                    break
                if it % adapt_every == 0:
                    self._maybe_rebalance(X, Z, Y, Q, CX, pri, dua)
        return X, Z, Y, it, pri, dua, status

    def _maybe_rebalance(self, X, Z, Y, Q, CX, pri, dua):
        pscale = max(np.abs(CX).max(), np.abs(Z).max(), 1e-10)
        dscale = max(np.abs(self.P @ X).max(), np.abs(Q).max(),
                     np.abs(self.C.T @ Y).max(), 1e-10)
        ratio = np.sqrt((pri / pscale) / max(dua / dscale, 1e-16))
        new_rho = float(np.clip(self.rho * ratio, 1e-6, 1e6))
        if new_rho > 5.0 * self.rho or new_rho < self.rho / 5.0:
            self._set_rho(new_rho)


def _polish_qp(P, q, C, lo, hi, n_eq, x, y, tol):
    """Active-set refinement: equality-solve the detected active constraints.

    Returns (x, lambda, ok); lambda covers all C rows (zeros where inactive).
    Falls back (ok=False) if the polished point is infeasible or a multiplier
    sign check fails.
    """
    m = C.shape[0]
    act = np.zeros(m, dtype=bool)
    act[:n_eq] = True
    slack = hi - C @ x
    act[n_eq:] = (slack[n_eq:] < 10 * tol) | (y[n_eq:] > 10 * tol)
    Ca = C[act]
    k = Ca.shape[0]
    KKT = np.block([[P, Ca.T], [Ca, np.zeros((k, k))]])
    rhs = np.concatenate([-q, hi[act]])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    xp, nu = sol[:P.shape[0]], sol[P.shape[0]:]
    lam = np.zeros(m)
    lam[act] = nu
    feas = np.all(C[n_eq:] @ xp <= hi[n_eq:] + 1e-8) if m > n_eq else True
    feas &= np.abs(C[:n_eq] @ xp - hi[:n_eq]).max() < 1e-8 if n_eq else True
    duals_ok = np.all(lam[n_eq:] >= -1e-9)
    stat = np.abs(P @ xp + q + C.T @ lam).max()
    if feas and duals_ok and stat < 1e-8:
        return xp, lam, True
    return x, y, False


def qp_solve(P, q, A=None, b=None, G=None, h=None, tol=1e-6, max_iter=20000):
    """Minimize 1/2 x'Px + q'x subject to Ax = b and Gx <= h."""
    P = np.asarray(P, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = P.shape[0]
    C, lo, hi, n_eq = _stack_constraints(A, b, G, h, n)
    admm = _BoxAdmm(P, C, lo, hi, n_eq)
    X, Z, Y, it, pri, dua, status = admm.solve(q[:, None], tol=tol, max_iter=max_iter)
    x, y = X[:, 0], Y[:, 0]
    polished = False
    if status == "converged":
        x, y, polished = _polish_qp(P, q, C, lo, hi, n_eq, x, y, tol)
        if polished:
            pri = max(np.abs(C[:n_eq] @ x - hi[:n_eq]).max() if n_eq else 0.0,
                      float(np.maximum(C[n_eq:] @ x - hi[n_eq:], 0.0).max()) if C.shape[0] > n_eq else 0.0)
            dua = float(np.abs(P @ x + q + C.T @ y).max())
    lam_ineq = np.maximum(y[n_eq:], 0.0) if C.shape[0] > n_eq else np.zeros(0)
    return QpSolution(x, y[:n_eq].copy(), lam_ineq, status, float(pri), float(dua),
                      it, polished)


class PolytopeProjector:
    """Reusable Euclidean projector onto {Ax = b, Gx <= h}.

    Equality constraints are eliminated up front: with an orthonormal basis
    Z of null(A), projection onto the polytope splits into a fixed affine
    shift plus a smaller inequality-only projection in null-space
    coordinates, so equalities hold to machine precision by construction.
    The splitting matrix is factorized once; a batch of points is projected
    simultaneously.  Pass the returned state back in as `warm` when
    projecting a slowly moving batch (as in projected gradient descent) to
    cut iteration counts sharply.
    """

    def __init__(self, A, b, G, h, tol=1e-8, max_iter=20000):
        n = (A if A is not None else G).shape[1]
        self.n = n
        self.tol = tol
        self.max_iter = max_iter
        if A is not None:
            A = np.atleast_2d(np.asarray(A, dtype=np.float64))
            b = np.atleast_1d(np.asarray(b, dtype=np.float64))
            self.x_eq = np.linalg.lstsq(A, b, rcond=None)[0]
            self.basis = scipy.linalg.null_space(A)
            if self.basis.shape[1] == 0:
                raise ValueError("equality constraints leave no degrees of freedom")
        else:
            self.x_eq = np.zeros(n)
            self.basis = np.eye(n)
        self.admm = None
        if G is not None:
            G = np.atleast_2d(np.asarray(G, dtype=np.float64))
            h = np.atleast_1d(np.asarray(h, dtype=np.float64))
            self.Gr = G @ self.basis
            self.hr = h - G @ self.x_eq
            k = self.basis.shape[1]
            self.Pr = np.eye(k)
            self.lo = np.full(G.shape[0], -np.inf)
            self.admm = _BoxAdmm(self.Pr, self.Gr, self.lo, self.hr, 0)

    def project(self, points, warm=None, polish=True):
        """Project rows of `points`; returns (projected rows, warm state)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        Yc = (pts - self.x_eq) @ self.basis          # null-space coordinates
        if self.admm is None:
            out = self.x_eq + Yc @ self.basis.T
            return (out[0] if np.asarray(points).ndim == 1 else out), None
        Q = -Yc.T
        X, Z, Y, it, pri, dua, status = self.admm.solve(
            Q, tol=self.tol, max_iter=self.max_iter, warm=warm)
        if status == "diverged":
            raise DivergenceError("projection ADMM diverged")
        if polish:
            for j in range(X.shape[1]):
                xj, yj, ok = _polish_qp(self.Pr, Q[:, j], self.Gr, self.lo, self.hr,
                                        0, X[:, j], Y[:, j], self.tol)
                if ok:
                    X[:, j], Y[:, j] = xj, yj
        out = self.x_eq + X.T @ self.basis.T
        return (out[0] if np.asarray(points).ndim == 1 else out), (X, Z, Y)


def project_polytope(x_hat, A=None, b=None, G=None, h=None, tol=1e-8):
    """One-shot polytope projection (builds a projector and discards it)."""
    proj = PolytopeProjector(A, b, G, h, tol=tol)
    out, _ = proj.project(x_hat)
    return out


def power_iteration(S, iters=50, seed=0):
    """Largest-eigenvalue estimate of a symmetric PSD matrix."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=S.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = S @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(v @ S @ v)


def solve_portfolio_oracle(problem, zeta, tol=1e-10, max_iter=5000):
    """Exact-risk-balancing allocations for a batch of price vectors.

    Projected gradient ascent with the Lipschitz step 1/(2*lambda*lmax + eps)
    runs on the whole batch at once; an active-support KKT solve then
    polishes each point to solver precision.

    Returns (x_star, f_star, info) with info holding the worst KKT
    stationarity residual and iteration count.
    """
    Z = np.atleast_2d(np.asarray(zeta, dtype=np.float64))
    B, D = Z.shape
    lam = problem.risk_weight
    Sig = problem.cov
    lmax = power_iteration(Sig, iters=50)
    step = 1.0 / (2.0 * lam * lmax + 1e-9)
    X = np.full((B, D), 1.0 / D)
    it = 0
    for it in range(1, max_iter + 1):
        grad = Z - 2.0 * lam * (X @ Sig)
        Xn = project_simplex(X + step * grad)
        move = np.abs(Xn - X).max()
        X = Xn
        if move < tol:
            break
    X, kkt = _polish_portfolio(Sig, lam, Z, X)
    f = problem.objective(X, Z)
    # the polish decides convergence; the gradient phase is only a warm start
    status = "converged" if kkt <= 1e-8 else "max_iter"
    return X, f, {"iterations": it, "kkt_residual": kkt, "status": status}


def _polish_portfolio(Sig, lam, Z, X, support_tol=1e-7, max_rounds=None):
    """Active-support refinement on the simplex, one sample at a time.

    On the support S the optimum solves 2*lam*Sig_SS x_S + nu 1 = zeta_S with
    1'x_S = 1; coordinates leaving the support are dropped, coordinates whose
    reduced gradient beats nu are added, until the KKT system is consistent.
    """
    B, D = X.shape
    max_rounds = max_rounds or 3 * D
    kkt_worst = 0.0
    for i in range(B):
        z = Z[i]
        support = X[i] > support_tol
        if not support.any():
            support[np.argmax(z)] = True
        for _ in range(max_rounds):
            S = np.flatnonzero(support)
            k = len(S)
            M = np.zeros((k + 1, k + 1))
            M[:k, :k] = 2.0 * lam * Sig[np.ix_(S, S)]
            M[:k, k] = 1.0
            M[k, :k] = 1.0
            rhs = np.concatenate([z[S], [1.0]])
            try:
                sol = np.linalg.solve(M, rhs)
            except np.linalg.LinAlgError:
                sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
            xs, nu = sol[:k], sol[k]
            if xs.min() < -1e-12:
                support[S[np.argmin(xs)]] = False
                continue
            x_full = np.zeros(D)
            x_full[S] = np.maximum(xs, 0.0)
            grad = z - 2.0 * lam * (Sig @ x_full)
            outside = ~support
            if outside.any() and grad[outside].max() > nu + 1e-10:
                j = np.flatnonzero(outside)[np.argmax(grad[outside])]
                support[j] = True
                continue
            ssum = x_full.sum()
            if ssum > 0:
                x_full /= ssum
            X[i] = x_full
            resid = max(np.abs(grad[S] - nu).max(),
                        float(np.maximum(grad[outside] - nu, 0.0).max()) if outside.any() else 0.0)
            kkt_worst = max(kkt_worst, resid)
            break
    return X, kkt_worst


def solve_toy2d_oracle(problem, zeta):
    """Closed-form optimum of the 2-D triangle problem for zeta > 0.

    The origin-facing edge x1 + x2 = 0.3 always carries the optimum (scaling
    any interior point toward the origin stays feasible until that edge), so
    minimizing along it and clamping to its endpoints is exact.
    """
    Z = np.atleast_2d(np.asarray(zeta, dtype=np.float64))
    if Z.min() <= 0:
        raise ValueError("closed-form oracle requires strictly positive zeta")
    x1 = 0.3 * Z[:, 1] / (Z[:, 0] + Z[:, 1])
    x1 = np.clip(x1, 0.1, 1.0 / 6.0)
    X = np.column_stack([x1, 0.3 - x1])
    return X, problem.objective(X, Z), {"status": "closed_form"}


def solve_nonconvex_oracle(problem, zeta, restarts=8, tol=1e-8, max_iter=500,
                           step0=1e-2, seed=0, projector=None,
                           start_spread=2.0 * np.pi):
    """Multi-start projected gradient descent on the oscillating QP.

    Start 0 is the stored witness; the rest are projections of the witness
    plus uniform noise of half-width start_spread.  The spread defaults to
    one full period of the oscillating term so distinct basins are seeded,
    not just the witness's own.  All samples and restarts run as one batch,
    sharing a warm-started projector.  Among converged local optima, ties
    go to the lowest restart index.

    Returns (x_star, f_star, info).
    """
    Z = np.atleast_2d(np.asarray(zeta, dtype=np.float64))
    B, n = Z.shape[0], problem.n
    R = max(1, int(restarts))
    if projector is None:
        projector = PolytopeProjector(problem.A, problem.b, problem.G, problem.h, tol=1e-9)
    rng = np.random.default_rng(seed)

    starts = np.empty((R, n))
    starts[0] = problem.witness
    if R > 1:
        noised = problem.witness + rng.uniform(-start_spread, start_spread,
                                               size=(R - 1, n))
        starts[1:], _ = projector.project(noised)

    # columns: restart-major blocks of the sample batch; converged columns
    # are dropped from the working set so stragglers don't cost full batches
    X = np.repeat(starts, B, axis=0)                    # (R*B, n)
    Zrep = np.tile(Z, (R, 1))
    step = np.full(R * B, step0)
    f = problem.objective(X, Zrep)
    k = projector.basis.shape[1]
    m = 0 if projector.admm is None else projector.Gr.shape[0]
    warm_buf = (np.zeros((k, R * B)), np.zeros((m, R * B)), np.zeros((m, R * B)))
    warm_live = np.zeros(R * B, dtype=bool)
    active = np.ones(R * B, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        grad = problem.objective_grad_x(X[idx], Zrep[idx])
        warm = tuple(a[:, idx] for a in warm_buf) if warm_live[idx].all() else None
        cand, state = projector.project(X[idx] - step[idx, None] * grad,
                                        warm=warm, polish=False)
        cand = np.atleast_2d(cand)
        if state is not None:
            for buf, arr in zip(warm_buf, state):
                buf[:, idx] = arr
            warm_live[idx] = True
        f_cand = problem.objective(cand, Zrep[idx])
        accept = f_cand <= f[idx] + 1e-15   # exhausted steps eventually accept in place
        move = np.abs(cand - X[idx]).max(axis=1)
        X[idx] = np.where(accept[:, None], cand, X[idx])
        f[idx] = np.where(accept, f_cand, f[idx])
        step[idx] = np.where(accept, step[idx], step[idx] * 0.5)
        active[idx] = ~(accept & (move < tol))
    X, _ = projector.project(X, polish=True)
    f = problem.objective(X, Zrep)

    Xb = X.reshape(R, B, n)
    fb = f.reshape(R, B)
    best = np.argmin(fb, axis=0)          # argmin takes the lowest index on ties
    x_star = Xb[best, np.arange(B)]
    f_star = fb[best, np.arange(B)]
    return x_star, f_star, {"restarts": R, "local_values": fb, "status": "done"}


def build_oracle_cache(problem, zeta, kind, **kwargs):
    """Solve every row of zeta; returns (x_star, f_star, info) arrays.

    kind selects the solver: "portfolio", "nonconvex", or "toy2d".
    f_star is recomputed from (x_star, zeta) through the problem objective,
    so the cached pair is self-consistent by construction.
    """
    if kind == "portfolio":
        x, _, info = solve_portfolio_oracle(problem, zeta, **kwargs)
    elif kind == "nonconvex":
        x, _, info = solve_nonconvex_oracle(problem, zeta, **kwargs)
    elif kind == "toy2d":
        x, _, info = solve_toy2d_oracle(problem, zeta, **kwargs)
    else:
        raise ValueError(f"unknown oracle kind: {kind!r}")
    f = problem.objective(x, np.atleast_2d(zeta))
    return x, f, info
