"""Parametric constrained problems, instance generators, and regret metrics.

Each problem bundles an objective f(x, zeta), linear constraints (Ax = b,
Gx <= h), analytic derivatives, and a tape-graph evaluator so trained models
can differentiate through f.  Residual conventions: g(x) = Gx - h <= 0 and
h(x) = Ax - b = 0 at feasible points.
"""

import io
import json
import warnings

import numpy as np

from . import autodiff as ad
from .ioutil import atomic_write_text


class ParametricProblem:
    """Base class: linear constraints, batched evaluators, sense handling.

    Subclasses set n (decision dim), param_dim (width of zeta), sense
    ("minimize" or "maximize"), and the constraint data A, b (equalities,
    possibly None) and G, h (inequalities, possibly None).
    """

    sense = "minimize"
    A = b = G = h = None

    @property
    def n_eq(self):
        return 0 if self.A is None else self.A.shape[0]

    @property
    def n_ineq(self):
        return 0 if self.G is None else self.G.shape[0]

    @property
    def sense_sign(self):
        # +1 when minimizing, -1 when maximizing: sense_sign * f is always a loss.
        return -1.0 if self.sense == "maximize" else 1.0

    def _check_pair(self, x, zeta):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        zeta = np.atleast_2d(np.asarray(zeta, dtype=np.float64))
        if x.shape[1] != self.n:
            raise ValueError(f"x has width {x.shape[1]}, expected {self.n}")
        if zeta.shape[1] != self.param_dim:
            raise ValueError(f"zeta has width {zeta.shape[1]}, expected {self.param_dim}")
        if x.shape[0] != zeta.shape[0]:
            raise ValueError(f"batch mismatch: {x.shape[0]} vs {zeta.shape[0]}")
        return x, zeta

    def eq_residuals(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.A is None:
            return np.zeros((x.shape[0], 0))
        return x @ self.A.T - self.b

    def ineq_residuals(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.G is None:
            return np.zeros((x.shape[0], 0))
        return x @ self.G.T - self.h

    def eq_residuals_graph(self, tape, x):
        return ad.matmul(x, ad.constant(tape, self.A.T)) - ad.constant(tape, self.b)

    def ineq_residuals_graph(self, tape, x):
        return ad.matmul(x, ad.constant(tape, self.G.T)) - ad.constant(tape, self.h)

    def objective(self, x, zeta):
        raise NotImplementedError

    def objective_grad_x(self, x, zeta):
        raise NotImplementedError

    def objective_grad_zeta(self, x, zeta):
        raise NotImplementedError

    def objective_graph(self, tape, x, zeta):
        """Per-sample objective values as a (batch,) Var on the tape."""
        raise NotImplementedError


class PortfolioProblem(ParametricProblem):
    """Markowitz allocation on the probability simplex.

    maximize  zeta' x - risk_weight * x' Sigma x
    s.t.      1' x = 1,  x >= 0
    """

    sense = "maximize"

    def __init__(self, cov, risk_weight=2.0):
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got {cov.shape}")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance not symmetric to 1e-12")
        eigs = np.linalg.eigvalsh(cov)
        if eigs.min() < -1e-10:
            raise ValueError(f"covariance has eigenvalue {eigs.min():.3e} < -1e-10")
        if risk_weight <= 0:
            raise ValueError("risk_weight must be positive")
        self.cov = cov
        self.risk_weight = float(risk_weight)
        self.n = cov.shape[0]
        self.param_dim = self.n
        # simplex as one equality plus sign constraints
        self.A = np.ones((1, self.n))
        self.b = np.ones(1)
        self.G = -np.eye(self.n)
        self.h = np.zeros(self.n)

    def objective(self, x, zeta):
        x, zeta = self._check_pair(x, zeta)
        quad = np.einsum("bi,ij,bj->b", x, self.cov, x)
        return np.einsum("bi,bi->b", zeta, x) - self.risk_weight * quad

    def objective_grad_x(self, x, zeta):
        x, zeta = self._check_pair(x, zeta)
        return zeta - 2.0 * self.risk_weight * (x @ self.cov)

    def objective_grad_zeta(self, x, zeta):
        x, _ = self._check_pair(x, zeta)
        return x.copy()

    def objective_graph(self, tape, x, zeta):
        zc = zeta if isinstance(zeta, ad.Var) else ad.constant(tape, np.atleast_2d(zeta))
        ret = ad.reduce_sum(zc * x, axis=1)
        risk = ad.reduce_sum(ad.matmul(x, ad.constant(tape, self.cov)) * x, axis=1)
        return ret - ad.constant(tape, self.risk_weight) * risk


class NonconvexQpProblem(ParametricProblem):
    """Convex quadratic plus an oscillating parametric term.

    minimize  0.5 x' Q x + zeta' sin(x)
    s.t.      A x = b,  G x <= h
    """

    sense = "minimize"

    def __init__(self, Q, A, b, G, h, witness=None):
        Q = np.asarray(Q, dtype=np.float64)
        if np.max(np.abs(Q - Q.T)) > 1e-12:
            raise ValueError("Q not symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q not positive semidefinite")
        self.Q = Q
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.G = np.asarray(G, dtype=np.float64)
        self.h = np.asarray(h, dtype=np.float64)
        self.n = Q.shape[0]
        self.param_dim = self.n
        self.witness = None if witness is None else np.asarray(witness, dtype=np.float64)

    def objective(self, x, zeta):
        x, zeta = self._check_pair(x, zeta)
        quad = 0.5 * np.einsum("bi,ij,bj->b", x, self.Q, x)
        return quad + np.einsum("bi,bi->b", zeta, np.sin(x))

    def objective_grad_x(self, x, zeta):
        x, zeta = self._check_pair(x, zeta)
        return x @ self.Q + zeta * np.cos(x)

    def objective_grad_zeta(self, x, zeta):
        x, _ = self._check_pair(x, zeta)
        return np.sin(x)

    def objective_graph(self, tape, x, zeta):
        zc = zeta if isinstance(zeta, ad.Var) else ad.constant(tape, np.atleast_2d(zeta))
        quad = ad.constant(tape, 0.5) * ad.reduce_sum(
            ad.matmul(x, ad.constant(tape, self.Q)) * x, axis=1)
        return quad + ad.reduce_sum(zc * ad.sin(x), axis=1)


class Toy2DProblem(ParametricProblem):
    """Two-variable weighted quadratic over a small triangle.

    minimize  zeta_1 x_1^2 + zeta_2 x_2^2
    s.t.      x_1 + 2 x_2 <= 0.5,  2 x_1 - x_2 <= 0.2,  x_1 + x_2 >= 0.3

    The constraints are the inequality relaxation of an illustrative set of
    three equalities that admit no common solution in the plane; relaxed,
    the feasible region is a nondegenerate triangle and the optimum moves
    with zeta.
    """

    sense = "minimize"

    def __init__(self):
        self.n = 2
        self.param_dim = 2
        self.G = np.array([[1.0, 2.0], [2.0, -1.0], [-1.0, -1.0]])
        self.h = np.array([0.5, 0.2, -0.3])

    def objective(self, x, zeta):
        x, zeta = self._check_pair(x, zeta)
        return np.einsum("bi,bi->b", zeta, x * x)

    def objective_grad_x(self, x, zeta):
        x, zeta = self._check_pair(x, zeta)
        return 2.0 * zeta * x

    def objective_grad_zeta(self, x, zeta):
        x, _ = self._check_pair(x, zeta)
        return x * x

    def objective_graph(self, tape, x, zeta):
        zc = zeta if isinstance(zeta, ad.Var) else ad.constant(tape, np.atleast_2d(zeta))
        return ad.reduce_sum(zc * ad.square(x), axis=1)


def generate_nonconvex_instance(n, n_eq, n_ineq, seed):
    """Random feasible-by-construction instance.

    Q = M'M/n keeps the quadratic PSD; b and h are derived from a stored
    witness point x0 (b = A x0, h = G x0 + slack) so the feasible set always
    has nonempty interior, unlike fully uniform right-hand sides.
    """
    if n_eq >= n:
        raise ValueError(f"need n_eq < n, got n_eq={n_eq}, n={n}")
    rng = np.random.default_rng(seed)
    M = rng.uniform(-1.0, 1.0, size=(n, n))
    Q = M.T @ M / n
    A = rng.uniform(-1.0, 1.0, size=(n_eq, n))
    G = rng.uniform(-1.0, 1.0, size=(n_ineq, n))
    x0 = rng.uniform(-1.0, 1.0, size=n)
    b = A @ x0
    h = G @ x0 + rng.uniform(0.0, 1.0, size=n_ineq)
    return NonconvexQpProblem(Q, A, b, G, h, witness=x0)


def generate_portfolio_data(n_assets, num_factors, n_samples, seed,
                            noise_std=0.05, persistence=0.9, base_len=1260):
    """Synthetic asset-price data under a factor covariance model.

    A latent AR(1) factor series of length base_len drives base prices
        zhat_t = level + F f_t + u_t,
    and samples are zeta_i = alpha * (zhat_t + eps_i) with alpha = 0.24 and
    eps ~ N(0, noise_std^2 I), circularly iterating t over the base series
    (so n_samples > base_len revisits base days under fresh noise).
    The covariance is the factor-model form Sigma = F Sigma_F F' + D_idio,
    with Sigma_F the sample covariance of the simulated factors and D_idio
    the diagonal idiosyncratic variance.

    Parameters
    ----------
    n_assets, num_factors, n_samples : int
        Dimensions; num_factors <= n_assets.
    seed : int
        Drives every draw below.
    noise_std : float
        Std of the per-sample observation noise eps (0 gives zeta = alpha*zhat).
    persistence : float
        AR(1) coefficient of the latent factors, strictly inside (-1, 1).
    base_len : int
        Length of the underlying series the samples cycle over.

    Returns
    -------
    (PortfolioProblem, ndarray of shape (n_samples, n_assets))
    """
    if num_factors > n_assets:
        raise ValueError("num_factors must not exceed n_assets")
    if not -1.0 < persistence < 1.0:
        raise ValueError("persistence must lie in (-1, 1)")
    if base_len < 1:
        raise ValueError("base_len must be positive")
    rng = np.random.default_rng(seed)
    alpha = 0.24

    loadings = rng.uniform(0.0, 1.0, size=(n_assets, num_factors)) / np.sqrt(num_factors)
    level = rng.uniform(2.0, 4.0, size=n_assets)
    idio_std = rng.uniform(0.05, 0.15, size=n_assets)

    # stationary AR(1): innovations scaled so each factor has unit variance
    innov_std = np.sqrt(1.0 - persistence ** 2)
    factors = np.empty((base_len, num_factors))
    state = rng.normal(0.0, 1.0, size=num_factors)
    for t in range(base_len):
        state = persistence * state + rng.normal(0.0, innov_std, size=num_factors)
        factors[t] = state

    factor_cov = np.cov(factors, rowvar=False, bias=True).reshape(num_factors, num_factors)
    cov = loadings @ factor_cov @ loadings.T + np.diag(idio_std ** 2)
    cov = 0.5 * (cov + cov.T)

    base = level + factors @ loadings.T \
        + rng.normal(0.0, 1.0, size=(base_len, n_assets)) * idio_std
    idx = np.arange(n_samples) % base_len
    eps = rng.normal(0.0, noise_std, size=(n_samples, n_assets)) if noise_std > 0 \
        else np.zeros((n_samples, n_assets))
    zeta = alpha * (base[idx] + eps)

    return PortfolioProblem(cov, risk_weight=2.0), zeta


class PtoDataset:
    """Aligned (z, zeta, x_star, f_star) records with a train/test split."""

    def __init__(self, z, zeta, x_star=None, f_star=None, test_mask=None, metadata=None):
        self.z = np.asarray(z, dtype=np.float64)
        self.zeta = np.asarray(zeta, dtype=np.float64)
        n = self.z.shape[0]
        if self.zeta.shape[0] != n:
            raise ValueError("z and zeta record counts differ")
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=np.float64)
        self.f_star = None if f_star is None else np.asarray(f_star, dtype=np.float64)
        for arr, name in ((self.x_star, "x_star"), (self.f_star, "f_star")):
            if arr is not None and arr.shape[0] != n:
                raise ValueError(f"{name} record count differs from z")
        if test_mask is None:
            test_mask = np.zeros(n, dtype=bool)
        self.test_mask = np.asarray(test_mask, dtype=bool)
        self.metadata = dict(metadata or {})

    def __len__(self):
        return self.z.shape[0]

    @property
    def train_idx(self):
        return np.flatnonzero(~self.test_mask)

    @property
    def test_idx(self):
        return np.flatnonzero(self.test_mask)


def make_split(n, test_fraction, seed):
    """Deterministic boolean test mask: pure function of (n, fraction, seed)."""
    rng = np.random.default_rng(seed)
    n_test = int(round(n * test_fraction))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_test]] = True
    return mask


def save_dataset(dataset, csv_path):
    """Write records as CSV plus a JSON sidecar (metadata, split, f_star)."""
    cols, header = [], []
    for name, arr in (("z", dataset.z), ("zeta", dataset.zeta), ("xstar", dataset.x_star)):
        if arr is None:
            continue
        cols.append(arr)
        header.extend(f"{name}_{j}" for j in range(arr.shape[1]))
    table = np.hstack(cols)
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    np.savetxt(buf, table, fmt="%.17g", delimiter=",")
    atomic_write_text(csv_path, buf.getvalue())
    sidecar = dict(dataset.metadata)
    sidecar["test_indices"] = dataset.test_idx.tolist()
    sidecar["widths"] = {"z": dataset.z.shape[1], "zeta": dataset.zeta.shape[1],
                         "xstar": 0 if dataset.x_star is None else dataset.x_star.shape[1]}
    if dataset.f_star is not None:
        sidecar["fstar"] = dataset.f_star.tolist()
    atomic_write_text(_sidecar_path(csv_path), json.dumps(sidecar))


def load_dataset(csv_path):
    with open(_sidecar_path(csv_path)) as fh:
        sidecar = json.load(fh)
    widths = sidecar.pop("widths")
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    mz, mp, mx = widths["z"], widths["zeta"], widths["xstar"]
    z = table[:, :mz]
    zeta = table[:, mz:mz + mp]
    x_star = table[:, mz + mp:mz + mp + mx] if mx else None
    f_star = np.asarray(sidecar.pop("fstar")) if "fstar" in sidecar else None
    test_idx = sidecar.pop("test_indices")
    mask = np.zeros(z.shape[0], dtype=bool)
    mask[test_idx] = True
    return PtoDataset(z, zeta, x_star, f_star, mask, sidecar)


def _sidecar_path(csv_path):
    csv_path = str(csv_path)
    return (csv_path[:-4] if csv_path.endswith(".csv") else csv_path) + ".json"


def violation(problem, x):
    """Mean constraint violation per sample: avg over rows of [g]_+ and |h|."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    total = np.zeros(x.shape[0])
    count = problem.n_ineq + problem.n_eq
    if count == 0:
        return total
    if problem.n_ineq:
        total += np.maximum(problem.ineq_residuals(x), 0.0).sum(axis=1)
    if problem.n_eq:
        total += np.abs(problem.eq_residuals(x)).sum(axis=1)
    return total / count


def regret(problem, x_hat, zeta, f_star, feas_tol=1e-6):
    """Suboptimality of x_hat under the true zeta, per sample.

    Sense-adjusted so the result is >= 0 (up to oracle tolerance) whenever
    x_hat is feasible and f_star is the true optimum.  Infeasible inputs
    beyond feas_tol trigger a warning; the value is still reported.
    """
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    f_star = np.atleast_1d(np.asarray(f_star, dtype=np.float64))
    worst = violation(problem, x_hat).max() if len(x_hat) else 0.0
    if worst > feas_tol:
        warnings.warn(f"regret evaluated on infeasible points (violation {worst:.2e})")
    f_hat = problem.objective(x_hat, zeta)
    return problem.sense_sign * (f_hat - f_star)


def percentage_regret(regret_values, f_star):
    """100 * regret / |f_star| per sample; near-zero optima fall back to absolute."""
    regret_values = np.atleast_1d(np.asarray(regret_values, dtype=np.float64))
    f_star = np.atleast_1d(np.asarray(f_star, dtype=np.float64))
    denom = np.abs(f_star)
    tiny = denom < 1e-12
    if np.any(tiny):
        warnings.warn(f"{int(tiny.sum())} optima below 1e-12; reporting absolute regret there")
    safe = np.where(tiny, 1.0, denom)
    return np.where(tiny, regret_values, 100.0 * regret_values / safe)
