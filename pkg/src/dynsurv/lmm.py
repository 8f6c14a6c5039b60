"""Linear mixed-effects submodel and subject trajectory functionals.

The marker model is y_i(t) = x_i(t)'beta + z_i(t)'b_i + eps, with natural
cubic splines of time in both designs, optionally interacted with a grouping
covariate in the fixed part:

    x_i(t) = e_g kron (1, B_1(t), ..., B_d(t)),    z_i(t) = (1, B_1(t), ..., B_d(t)).

Estimation is by maximum marginal likelihood (random effects integrated
analytically), with D parameterized through its Cholesky factor (log
diagonal) so positive-definiteness is maintained during optimization.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular

from .data import Dataset, SubjectRecord
from .errors import NumericalError
from .numerics import NcsBasis


@dataclass(frozen=True)
class LmmSpec:
    """Design configuration for the mixed model."""

    basis: NcsBasis
    group_covariate: str | None = None
    include_random_intercept_and_spline: bool = True
    diagonal_D: bool = False


class TrajectoryDesign:
    """Builds fixed/random design rows and their derivative/integral analogs."""

    def __init__(self, basis: NcsBasis, group_covariate=None, group_levels=(),
                 random_spline=True):
        self.basis = basis
        self.group_covariate = group_covariate
        self.group_levels = tuple(float(g) for g in group_levels) if group_covariate else ()
        self.random_spline = bool(random_spline)
        self.n_groups = max(1, len(self.group_levels))
        self.p = self.n_groups * (1 + basis.dimension)
        self.q = 1 + basis.dimension if self.random_spline else 1

    @classmethod
    def from_dataset(cls, dataset: Dataset, spec: LmmSpec) -> "TrajectoryDesign":
        levels = ()
        if spec.group_covariate is not None:
            if spec.group_covariate not in dataset.covariate_names:
                raise ValueError(f"unknown group covariate {spec.group_covariate!r}")
            levels = tuple(sorted({s.covariates[spec.group_covariate]
                                   for s in dataset.subjects}))
        return cls(spec.basis, spec.group_covariate, levels,
                   spec.include_random_intercept_and_spline)

    def group_index(self, subject: SubjectRecord) -> int:
        if self.group_covariate is None:
            return 0
        value = subject.covariates[self.group_covariate]
        for k, level in enumerate(self.group_levels):
            if value == level:
                return k
        raise ValueError(
            f"subject {subject.subject_id}: group value {value} not among levels "
            f"{self.group_levels}"
        )

    def _block(self, t, mode: str) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if mode == "value":
            lead = np.ones_like(t)
            body = self.basis.eval(t)
        elif mode == "deriv":
            lead = np.zeros_like(t)
            body = self.basis.deriv(t)
        elif mode == "integral":
            lead = t.copy()
            body = self.basis.integral(t)
        else:
            raise ValueError(f"unknown design mode {mode!r}")
        return np.column_stack([lead, np.atleast_2d(body)])

    def x_rows(self, t, group_index: int = 0, mode: str = "value") -> np.ndarray:
        block = self._block(t, mode)
        if self.n_groups == 1:
            return block
        out = np.zeros((block.shape[0], self.p))
        w = block.shape[1]
        out[:, group_index * w:(group_index + 1) * w] = block
        return out

    def z_rows(self, t, mode: str = "value") -> np.ndarray:
        block = self._block(t, mode)
        return block if self.random_spline else block[:, :1]

    def weighted_x_rows(self, nodes, weights, group_index: int = 0) -> np.ndarray:
        """Quadrature-weighted combination sum_k w_k x(s_k); one row."""
        return weights @ self.x_rows(nodes, group_index)

    def weighted_z_rows(self, nodes, weights) -> np.ndarray:
        return weights @ self.z_rows(nodes)

    def to_dict(self) -> dict:
        return {
            "knots": {
                "boundary": list(self.basis.boundary_knots),
                "internal": list(self.basis.internal_knots),
            },
            "groups": {
                "covariate": self.group_covariate,
                "levels": list(self.group_levels),
            },
            "random_spline": self.random_spline,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrajectoryDesign":
        basis = NcsBasis(tuple(payload["knots"]["boundary"]),
                         tuple(payload["knots"]["internal"]))
        groups = payload["groups"]
        return cls(basis, groups["covariate"], tuple(groups["levels"]),
                   payload.get("random_spline", True))


def trajectory(design: TrajectoryDesign, beta, group_index: int, b, t):
    """Return (m(t), m'(t), integral of m over [0, t]) for one subject."""
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    m = design.x_rows(t_arr, group_index) @ beta + design.z_rows(t_arr) @ b
    m_prime = (design.x_rows(t_arr, group_index, "deriv") @ beta
               + design.z_rows(t_arr, "deriv") @ b)
    m_area = (design.x_rows(t_arr, group_index, "integral") @ beta
              + design.z_rows(t_arr, "integral") @ b)
    if np.ndim(t) == 0:
        return float(m[0]), float(m_prime[0]), float(m_area[0])
    return m, m_prime, m_area


# --- D parameterization -----------------------------------------------------

def pack_cov(D: np.ndarray, diagonal: bool) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if diagonal:
        return 0.5 * np.log(np.diag(D))
    L = np.linalg.cholesky(D)
    q = D.shape[0]
    out = []
    for i in range(q):
        for j in range(i + 1):
            out.append(np.log(L[i, i]) if i == j else L[i, j])
    return np.array(out)


def unpack_cov(theta: np.ndarray, q: int, diagonal: bool) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if diagonal:
        return np.diag(np.exp(2.0 * theta))
    L = np.zeros((q, q))
    k = 0
    for i in range(q):
        for j in range(i + 1):
            L[i, j] = np.exp(theta[k]) if i == j else theta[k]
            k += 1
    return L @ L.T


def n_cov_params(q: int, diagonal: bool) -> int:
    return q if diagonal else q * (q + 1) // 2


def central_diff_grad(f, x, h_scale: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient with step h = h_scale * (1 + |x_j|)."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        h = h_scale * (1.0 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2.0 * h)
    return g


# --- Fit --------------------------------------------------------------------

@dataclass
class LmmFit:
    """Maximum-likelihood estimates of the mixed model."""

    beta: np.ndarray
    D: np.ndarray
    sigma: float
    loglik: float
    converged: bool
    design: TrajectoryDesign = field(repr=False)
    diagonal_D: bool = False
    n_iter: int = 0

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "D": self.D.tolist(),
            "sigma": self.sigma,
            "loglik": self.loglik,
            "converged": self.converged,
            "diagonal_D": self.diagonal_D,
            **self.design.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "LmmFit":
        return cls(
            beta=np.asarray(payload["beta"], dtype=float),
            D=np.asarray(payload["D"], dtype=float),
            sigma=float(payload["sigma"]),
            loglik=float(payload["loglik"]),
            converged=bool(payload["converged"]),
            design=TrajectoryDesign.from_dict(payload),
            diagonal_D=bool(payload.get("diagonal_D", False)),
        )


def subject_matrices(dataset: Dataset, design: TrajectoryDesign):
    """Per-subject (y_i, X_i, Z_i) at the observation times."""
    out = []
    for s in dataset.subjects:
        times = np.array(s.observation_times)
        g = design.group_index(s)
        out.append((
            np.array(s.observation_values),
            design.x_rows(times, g),
            design.z_rows(times),
        ))
    return out


def _marginal_loglik(matrices, D, sigma2):
    """Profile out beta analytically; return (loglik, beta_hat)."""
    p = matrices[0][1].shape[1]
    A = np.zeros((p, p))
    c = np.zeros(p)
    pieces = []
    n_total = 0
    for y, X, Z in matrices:
        V = Z @ D @ Z.T + sigma2 * np.eye(len(y))
        L = np.linalg.cholesky(V)
        Xs = solve_triangular(L, X, lower=True)
        ys = solve_triangular(L, y, lower=True)
        A += Xs.T @ Xs
        c += Xs.T @ ys
        pieces.append((Xs, ys, np.log(np.diag(L)).sum()))
        n_total += len(y)
    beta = np.linalg.solve(A, c)
    ll = -0.5 * n_total * np.log(2.0 * np.pi)
    for Xs, ys, logdet_half in pieces:
        r = ys - Xs @ beta
        ll -= logdet_half + 0.5 * float(r @ r)
    return ll, beta


def fit_lmm(dataset: Dataset, spec: LmmSpec, max_iter: int = 500) -> LmmFit:
    """Maximize the marginal Gaussian likelihood of the mixed model."""
    design = TrajectoryDesign.from_dataset(dataset, spec)
    matrices = subject_matrices(dataset, design)

    X_all = np.vstack([X for _, X, _ in matrices])
    if np.linalg.matrix_rank(X_all) < design.p:
        raise NumericalError("fixed-effects design is rank deficient")

    y_all = np.concatenate([y for y, _, _ in matrices])
    beta_ols, *_ = np.linalg.lstsq(X_all, y_all, rcond=None)
    resid = y_all - X_all @ beta_ols
    s2 = max(float(resid @ resid) / len(y_all), 1e-8)

    q = design.q
    n_d = n_cov_params(q, spec.diagonal_D)
    theta0 = np.concatenate([
        pack_cov(np.eye(q) * 0.5 * s2, spec.diagonal_D),
        [0.5 * np.log(0.5 * s2)],
    ])

    def negloglik(theta):
        D = unpack_cov(theta[:n_d], q, spec.diagonal_D)
        sigma2 = np.exp(2.0 * theta[n_d])
        try:
            ll, _ = _marginal_loglik(matrices, D, sigma2)
        except np.linalg.LinAlgError:
            return 1e12
        if not np.isfinite(ll):
            return 1e12
        return -ll

    res = optimize.minimize(
        negloglik,
        theta0,
        jac=lambda th: central_diff_grad(negloglik, th),
        method="L-BFGS-B",
        bounds=[(-10.0, 10.0)] * (n_d + 1),
        options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9},
    )

    D = unpack_cov(res.x[:n_d], q, spec.diagonal_D)
    sigma2 = np.exp(2.0 * res.x[n_d])
    ll, beta = _marginal_loglik(matrices, D, sigma2)
    converged = bool(res.status in (0, 2)) and res.nit <= max_iter
    return LmmFit(
        beta=beta,
        D=D,
        sigma=float(np.sqrt(sigma2)),
        loglik=float(ll),
        converged=converged,
        design=design,
        diagonal_D=spec.diagonal_D,
        n_iter=int(res.nit),
    )


def eb_mode(subject: SubjectRecord, fit: LmmFit):
    """Posterior mode and precision of b_i given the subject's marker data.

    For the Gaussian model this is the closed-form posterior mean and
    curvature Z'Z/sigma^2 + D^{-1}.
    """
    design = fit.design
    times = np.array(subject.observation_times)
    g = design.group_index(subject)
    X = design.x_rows(times, g)
    Z = design.z_rows(times)
    y = np.array(subject.observation_values)
    sigma2 = fit.sigma ** 2
    curvature = Z.T @ Z / sigma2 + np.linalg.inv(fit.D)
    rhs = Z.T @ (y - X @ fit.beta) / sigma2
    b_hat = np.linalg.solve(curvature, rhs)
    return b_hat, curvature
