"""Joint longitudinal/time-to-event model: likelihood and maximum-likelihood fit.

The hazard is h_i(t) = h0(t) exp{gamma'w_i + assoc_i(t)} where the association
term is one of five functional forms of the marker trajectory
m_i(t) = x_i(t)'beta + z_i(t)'b_i:

    value:         alpha1 * m_i(t)
    value_slope:   alpha1 * m_i(t) + alpha2 * m_i'(t)
    area:          alpha1 * int_0^t m_i(s) ds
    weighted_area: alpha1 * int_0^t rho(t-s) m_i(s) ds,
                   rho(u) = phi(u) / (Phi(t) - 0.5)
    shared_re:     alpha' b_i

Every form is linear in (beta, b): assoc(t) = sum_a alpha_a (Ax_a(t)'beta +
Az_a(t)'b), which lets one engine drive all of them. The marginal likelihood
integrates the random effects by adaptive Gauss-Hermite quadrature centered
at each subject's longitudinal posterior mode.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset, SubjectRecord
from .errors import NumericalError, SpecificationError
from .lmm import (
    LmmSpec,
    TrajectoryDesign,
    fit_lmm,
    n_cov_params,
    pack_cov,
    unpack_cov,
)
from .numerics import NcsBasis, bspline_design, gauss_hermite, norm_cdf, norm_pdf
from .numerics.quadrature import panel_points

FORM_KINDS = ("value", "value_slope", "area", "weighted_area", "shared_re")
BASELINE_KINDS = ("weibull", "bspline")

EXP_CLIP = 690.0  # exp() overflow guard for extreme linear predictors
WEIGHTED_AREA_WINDOW = 8.0  # rho(u) is numerically negligible beyond u = 8
_LOG_2PI = np.log(2.0 * np.pi)


def alpha_dim(form_kind: str, q: int) -> int:
    if form_kind in ("value", "area", "weighted_area"):
        return 1
    if form_kind == "value_slope":
        return 2
    if form_kind == "shared_re":
        return q
    raise SpecificationError(f"unknown functional form {form_kind!r}")


@dataclass(frozen=True)
class BaselineSpec:
    """Baseline hazard family; B-spline knots are on the log-hazard scale."""

    kind: str
    boundary: tuple[float, float] | None = None
    internal: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise SpecificationError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "bspline" and self.boundary is None:
            raise SpecificationError("bspline baseline requires boundary knots")

    @property
    def n_params(self) -> int:
        # weibull: log-shape (the log scale lives in gamma[0]);
        # bspline: intercept + cubic B-spline columns with the first dropped.
        if self.kind == "weibull":
            return 1
        return 1 + len(self.internal) + 3

    def design(self, t) -> np.ndarray:
        """Rows of the log-baseline design [1, B_2(t), ..., B_Q(t)]."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        cols = bspline_design(t, self.boundary, self.internal, drop_first=True)
        return np.column_stack([np.ones(len(t)), cols])


@dataclass(frozen=True)
class JointModelConfig:
    """User-facing configuration of a joint model fit."""

    form: str
    baseline: str = "weibull"
    boundary_knots: tuple[float, float] = (0.0, 19.0)
    internal_knots: tuple[float, ...] = (2.1, 5.5)
    group_covariate: str | None = None
    gamma_covariates: tuple[str, ...] | None = None
    diagonal_D: bool = False
    baseline_internal_knots: int = 5
    gh_nodes: int | None = None

    def __post_init__(self):
        if self.form not in FORM_KINDS:
            raise SpecificationError(f"unknown functional form {self.form!r}")
        if self.baseline not in BASELINE_KINDS:
            raise SpecificationError(f"unknown baseline kind {self.baseline!r}")


class JointModelStructure:
    """Frozen design information shared by the likelihood, fit, and predictions."""

    def __init__(self, design: TrajectoryDesign, form: str, baseline: BaselineSpec,
                 gamma_covariates: tuple[str, ...]):
        self.design = design
        self.form = form
        self.baseline = baseline
        self.gamma_covariates = tuple(gamma_covariates)
        self.q = design.q
        self.p = design.p
        self.n_assoc = alpha_dim(form, design.q)
        # weibull carries its log-scale as an intercept in gamma
        self.gamma_has_intercept = baseline.kind == "weibull"
        self.n_gamma = len(self.gamma_covariates) + int(self.gamma_has_intercept)

    @classmethod
    def from_config(cls, dataset: Dataset, config: JointModelConfig) -> "JointModelStructure":
        basis = NcsBasis(config.boundary_knots, config.internal_knots)
        spec = LmmSpec(basis, config.group_covariate, True, config.diagonal_D)
        design = TrajectoryDesign.from_dataset(dataset, spec)
        gamma_covs = (config.gamma_covariates
                      if config.gamma_covariates is not None
                      else dataset.covariate_names)
        if config.baseline == "weibull":
            baseline = BaselineSpec("weibull")
        else:
            events = sorted(s.event_time for s in dataset.subjects if s.status == 1)
            if not events:
                raise NumericalError("bspline baseline needs at least one event")
            k = config.baseline_internal_knots
            qs = [(j + 1) / (k + 1) for j in range(k)]
            internal = tuple(float(np.quantile(events, qu)) for qu in qs)
            internal = tuple(sorted(set(internal)))
            hi = max(s.event_time for s in dataset.subjects)
            baseline = BaselineSpec("bspline", (0.0, float(hi)), internal)
        return cls(design, config.form, baseline, gamma_covs)

    # -- per-subject design pieces --------------------------------------

    def w_row(self, subject: SubjectRecord) -> np.ndarray:
        vals = [subject.covariates[c] for c in self.gamma_covariates]
        if self.gamma_has_intercept:
            return np.array([1.0, *vals])
        return np.array(vals, dtype=float)

    def assoc_rows(self, t, group_index: int) -> tuple[np.ndarray, np.ndarray]:
        """(Ax, Az) with assoc_a(t) = Ax[t,a]'beta + Az[t,a]'b."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        design, form = self.design, self.form
        nt, A = len(t), self.n_assoc
        Ax = np.zeros((nt, A, self.p))
        Az = np.zeros((nt, A, self.q))
        if form == "value":
            Ax[:, 0, :] = design.x_rows(t, group_index)
            Az[:, 0, :] = design.z_rows(t)
        elif form == "value_slope":
            Ax[:, 0, :] = design.x_rows(t, group_index)
            Az[:, 0, :] = design.z_rows(t)
            Ax[:, 1, :] = design.x_rows(t, group_index, "deriv")
            Az[:, 1, :] = design.z_rows(t, "deriv")
        elif form == "area":
            Ax[:, 0, :] = design.x_rows(t, group_index, "integral")
            Az[:, 0, :] = design.z_rows(t, "integral")
        elif form == "weighted_area":
            for i, ti in enumerate(t):
                Ax[i, 0, :], Az[i, 0, :] = self._weighted_area_rows(ti, group_index)
        elif form == "shared_re":
            Az[:, :, :] = np.eye(self.q)
        return Ax, Az

    def _weighted_area_rows(self, t: float, group_index: int):
        if t < 1e-8:
            return np.zeros(self.p), np.zeros(self.q)
        lo = max(0.0, t - WEIGHTED_AREA_WINDOW)
        cuts = sorted({t - 1.0, t - 2.5, t - 4.0, t - 6.0, *self.design.basis.internal_knots})
        nodes, weights = panel_points(lo, t, [c for c in cuts if lo < c < t])
        rho = norm_pdf(t - nodes) / (norm_cdf(t) - 0.5)
        wr = weights * rho
        return (wr @ self.design.x_rows(nodes, group_index),
                wr @ self.design.z_rows(nodes))

    def quad_cuts(self) -> tuple[float, ...]:
        return self.baseline.internal if self.baseline.kind == "bspline" else ()

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "baseline": {
                "kind": self.baseline.kind,
                "boundary": list(self.baseline.boundary) if self.baseline.boundary else None,
                "internal": list(self.baseline.internal),
            },
            "gamma_covariates": list(self.gamma_covariates),
            **self.design.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "JointModelStructure":
        design = TrajectoryDesign.from_dict(payload)
        b = payload["baseline"]
        baseline = BaselineSpec(
            b["kind"],
            tuple(b["boundary"]) if b.get("boundary") else None,
            tuple(b.get("internal", ())),
        )
        return cls(design, payload["form"], baseline, tuple(payload["gamma_covariates"]))


@dataclass
class JointTheta:
    """Natural-scale parameter bundle theta = (beta, D, sigma, gamma, alpha, baseline)."""

    beta: np.ndarray
    D: np.ndarray
    sigma: float
    gamma: np.ndarray
    alpha: np.ndarray
    sigma_t: float | None = None          # weibull shape
    gamma_h0: np.ndarray | None = None    # bspline log-baseline coefficients

    def to_dict(self) -> dict:
        out = {
            "beta": self.beta.tolist(),
            "D": self.D.tolist(),
            "sigma": self.sigma,
            "gamma": self.gamma.tolist(),
            "alpha": self.alpha.tolist(),
        }
        if self.sigma_t is not None:
            out["sigma_t"] = self.sigma_t
        if self.gamma_h0 is not None:
            out["gamma_h0"] = self.gamma_h0.tolist()
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "JointTheta":
        return cls(
            beta=np.asarray(payload["beta"], dtype=float),
            D=np.asarray(payload["D"], dtype=float),
            sigma=float(payload["sigma"]),
            gamma=np.asarray(payload["gamma"], dtype=float),
            alpha=np.asarray(payload["alpha"], dtype=float),
            sigma_t=payload.get("sigma_t"),
            gamma_h0=(np.asarray(payload["gamma_h0"], dtype=float)
                      if payload.get("gamma_h0") is not None else None),
        )


# --- free-coordinate packing -------------------------------------------------

class ThetaPacker:
    """Maps JointTheta to the unconstrained coordinates used for optimization,
    the observed information, and posterior sampling of theta."""

    def __init__(self, structure: JointModelStructure, diagonal_D: bool):
        self.structure = structure
        self.diagonal_D = diagonal_D
        q, p = structure.q, structure.p
        self.n_d = n_cov_params(q, diagonal_D)
        self.labels = (
            [f"beta_{i+1}" for i in range(p)]
            + [f"covD_{i+1}" for i in range(self.n_d)]
            + ["log_sigma"]
            + ([f"gamma_{i}" for i in range(structure.n_gamma)]
               if structure.gamma_has_intercept
               else [f"gamma_{i+1}" for i in range(structure.n_gamma)])
            + [f"alpha_{i+1}" for i in range(structure.n_assoc)]
            + (["log_sigma_t"] if structure.baseline.kind == "weibull"
               else [f"gamma_h0_{i}" for i in range(structure.baseline.n_params)])
        )
        self.size = len(self.labels)

    def pack(self, theta: JointTheta) -> np.ndarray:
        parts = [
            theta.beta,
            pack_cov(theta.D, self.diagonal_D),
            [np.log(theta.sigma)],
            theta.gamma,
            theta.alpha,
        ]
        if self.structure.baseline.kind == "weibull":
            parts.append([np.log(theta.sigma_t)])
        else:
            parts.append(theta.gamma_h0)
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    def unpack(self, x: np.ndarray) -> JointTheta:
        s = self.structure
        i = 0
        beta = x[i:i + s.p]; i += s.p
        D = unpack_cov(x[i:i + self.n_d], s.q, self.diagonal_D); i += self.n_d
        sigma = float(np.exp(x[i])); i += 1
        gamma = x[i:i + s.n_gamma]; i += s.n_gamma
        alpha = x[i:i + s.n_assoc]; i += s.n_assoc
        if s.baseline.kind == "weibull":
            return JointTheta(beta, D, sigma, gamma, alpha, sigma_t=float(np.exp(x[i])))
        return JointTheta(beta, D, sigma, gamma, alpha,
                          gamma_h0=x[i:i + s.baseline.n_params])


# --- hazard / survival for a single subject ----------------------------------

def _log_h0(structure: JointModelStructure, theta: JointTheta, t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if structure.baseline.kind == "weibull":
        return np.log(theta.sigma_t) + (theta.sigma_t - 1.0) * np.log(np.maximum(t, 1e-300))
    return structure.baseline.design(t) @ theta.gamma_h0


def linear_predictor(structure: JointModelStructure, theta: JointTheta, b, w_row,
                     group_index: int, t):
    """eta_i(t) = gamma'w + sum_a alpha_a assoc_a(t) for one subject."""
    b = np.asarray(b, dtype=float)
    Ax, Az = structure.assoc_rows(t, group_index)
    f = Ax @ theta.beta + Az @ b
    eta = float(np.dot(theta.gamma, w_row)) + f @ theta.alpha
    return float(eta[0]) if np.ndim(t) == 0 else eta


def hazard(structure: JointModelStructure, theta: JointTheta, b, w_row,
           group_index: int, t):
    """h_i(t) = h0(t) exp(eta_i(t)); t must be positive under a Weibull baseline."""
    eta = linear_predictor(structure, theta, b, w_row, group_index, t)
    logh = _log_h0(structure, theta, t) + np.atleast_1d(eta)
    out = np.exp(np.clip(logh, -EXP_CLIP, EXP_CLIP))
    return float(out[0]) if np.ndim(t) == 0 else out


def cum_hazard(structure: JointModelStructure, theta: JointTheta, b, w_row,
               group_index: int, t: float) -> float:
    """H_i(t) by GK15 panels; exact for linear predictors constant in time."""
    if t < 0:
        raise ValueError("cum_hazard requires t >= 0")
    if t == 0.0:
        return 0.0
    b = np.asarray(b, dtype=float)
    nodes, weights = panel_points(0.0, t, [c for c in structure.quad_cuts() if c < t])
    eta = linear_predictor(structure, theta, b, w_row, group_index, nodes)
    if structure.baseline.kind == "weibull":
        eta0 = linear_predictor(structure, theta, b, w_row, group_index, 0.0)
        h0 = theta.sigma_t * np.maximum(nodes, 1e-300) ** (theta.sigma_t - 1.0)
        main = np.exp(np.clip(eta0, -EXP_CLIP, EXP_CLIP)) * t ** theta.sigma_t
        corr = weights @ (h0 * (np.exp(np.clip(eta, -EXP_CLIP, EXP_CLIP))
                                - np.exp(np.clip(eta0, -EXP_CLIP, EXP_CLIP))))
        return float(main + corr)
    logh = _log_h0(structure, theta, nodes) + eta
    return float(weights @ np.exp(np.clip(logh, -EXP_CLIP, EXP_CLIP)))


def survival(structure, theta, b, w_row, group_index, t) -> float:
    """S_i(t) = exp(-H_i(t))."""
    return float(np.exp(-cum_hazard(structure, theta, b, w_row, group_index, t)))


# --- marginal likelihood ------------------------------------------------------

def _gh_grid(q: int, nodes_per_dim: int, prune: float = 1e-10):
    rule = gauss_hermite(nodes_per_dim)
    grids = np.meshgrid(*([rule.nodes] * q), indexing="ij")
    tn = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([rule.weights] * q), indexing="ij")
    w = np.prod(np.column_stack([g.ravel() for g in wgrids]), axis=1)
    keep = w >= prune * w.max()
    tn, w = tn[keep], w[keep]
    # adaptive-GH base weight: log w_m + |t_m|^2 (the exp(-|t|^2) de-weighting
    # is folded back because the integrand carries the true density)
    logw = np.log(w) + np.sum(tn * tn, axis=1)
    return tn, logw


def default_nodes_per_dim(q: int) -> int:
    return 7 if q <= 2 else 5


class JointLikelihood:
    """Vectorized marginal log-likelihood of a joint model over a dataset."""

    def __init__(self, dataset: Dataset, structure: JointModelStructure,
                 gh_nodes: int | None = None):
        self.structure = structure
        self.dataset = dataset
        s = structure
        n = len(dataset.subjects)
        self.n = n
        q, p, A = s.q, s.p, s.n_assoc

        n_obs = [len(subj.observations) for subj in dataset.subjects]
        L = max(n_obs)
        self.n_i = np.array(n_obs, dtype=float)
        self.Y = np.zeros((n, L))
        self.X = np.zeros((n, L, p))
        self.Z = np.zeros((n, L, q))
        self.mask = np.zeros((n, L))

        self.T = np.array([subj.event_time for subj in dataset.subjects])
        self.delta = np.array([float(subj.status) for subj in dataset.subjects])
        self.W = np.zeros((n, s.n_gamma))

        cuts = s.quad_cuts()
        per_subject_quads = []
        for i, subj in enumerate(dataset.subjects):
            g = s.design.group_index(subj)
            times = np.array(subj.observation_times)
            k = len(times)
            self.Y[i, :k] = subj.observation_values
            self.X[i, :k] = s.design.x_rows(times, g)
            self.Z[i, :k] = s.design.z_rows(times)
            self.mask[i, :k] = 1.0
            self.W[i] = s.w_row(subj)
            nodes, weights = panel_points(0.0, subj.event_time,
                                          [c for c in cuts if c < subj.event_time])
            per_subject_quads.append((g, nodes, weights))

        NQ = max(len(nq[1]) for nq in per_subject_quads)
        self.NQ = NQ
        self.sq = np.ones((n, NQ))
        self.wq = np.zeros((n, NQ))
        self.AxT = np.zeros((n, A, p))
        self.AzT = np.zeros((n, A, q))
        self.Ax0 = np.zeros((n, A, p))
        self.Az0 = np.zeros((n, A, q))
        self.AxQ = np.zeros((n, NQ, A, p))
        self.AzQ = np.zeros((n, NQ, A, q))
        if s.baseline.kind == "bspline":
            self.BhT = np.zeros((n, s.baseline.n_params))
            self.BhQ = np.zeros((n, NQ, s.baseline.n_params))

        for i, subj in enumerate(dataset.subjects):
            g, nodes, weights = per_subject_quads[i]
            k = len(nodes)
            self.sq[i, :k] = nodes
            self.wq[i, :k] = weights
            AxT, AzT = s.assoc_rows(subj.event_time, g)
            self.AxT[i], self.AzT[i] = AxT[0], AzT[0]
            Ax0, Az0 = s.assoc_rows(0.0, g)
            self.Ax0[i], self.Az0[i] = Ax0[0], Az0[0]
            AxQ, AzQ = s.assoc_rows(nodes, g)
            self.AxQ[i, :k] = AxQ
            self.AzQ[i, :k] = AzQ
            if s.baseline.kind == "bspline":
                self.BhT[i] = s.baseline.design(subj.event_time)[0]
                self.BhQ[i, :k] = s.baseline.design(nodes)

        self.log_sq = np.log(self.sq)
        self.log_T = np.log(self.T)
        self.ZtZ = np.einsum("nlq,nlr->nqr", self.Z, self.Z)
        self.nodes_per_dim = gh_nodes or default_nodes_per_dim(q)
        self.tn, self.logw = _gh_grid(q, self.nodes_per_dim)
        self.M = len(self.tn)

    def with_nodes(self, nodes_per_dim: int) -> "JointLikelihood":
        clone = object.__new__(JointLikelihood)
        clone.__dict__.update(self.__dict__)
        clone.nodes_per_dim = nodes_per_dim
        clone.tn, clone.logw = _gh_grid(self.structure.q, nodes_per_dim)
        clone.M = len(clone.tn)
        return clone

    # -- the marginal log-likelihood ------------------------------------

    def loglik(self, theta: JointTheta) -> float:
        return float(np.sum(self.loglik_by_subject(theta)))

    def loglik_by_subject(self, theta: JointTheta) -> np.ndarray:
        s = self.structure
        n, q, M = self.n, s.q, self.M
        sigma2 = theta.sigma ** 2
        try:
            Dchol = np.linalg.cholesky(theta.D)
        except np.linalg.LinAlgError:
            return np.full(self.n, -np.inf)
        D_inv = cho_solve((Dchol, True), np.eye(q))
        Dchol_inv = np.linalg.inv(Dchol)
        logdet_D = 2.0 * np.sum(np.log(np.diag(Dchol)))

        # longitudinal posterior (EB) centers and scales
        resid0 = (self.Y - self.X @ theta.beta) * self.mask    # (n, L)
        prec = self.ZtZ / sigma2 + D_inv
        rhs = np.einsum("nlq,nl->nq", self.Z, resid0) / sigma2
        try:
            bc = np.linalg.solve(prec, rhs[..., None])[..., 0]
            Sigma = np.linalg.inv(prec)
            Lpost = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            return np.full(self.n, -np.inf)
        half_logdet = np.log(np.abs(np.diagonal(Lpost, axis1=1, axis2=2))).sum(axis=1)

        # quadrature nodes in b-space: (n, M, q)
        B = bc[:, None, :] + np.sqrt(2.0) * (self.tn @ Lpost.transpose(0, 2, 1))

        # longitudinal log-density
        ZB = self.Z @ B.transpose(0, 2, 1)                  # (n, L, M)
        r = resid0[:, :, None] - ZB * self.mask[:, :, None]
        r *= r
        sse = r.sum(axis=1)
        lly = -0.5 * (self.n_i * (_LOG_2PI + np.log(sigma2)))[:, None] - sse / (2.0 * sigma2)

        # random-effects prior
        v = B @ Dchol_inv.T                                 # (n, M, q)
        v *= v
        lpb = -0.5 * (q * _LOG_2PI + logdet_D + v.sum(axis=2))

        # survival factor
        lsurv = self._log_survival_factor(theta, B)

        integrand = lly + lpb + lsurv + self.logw[None, :]
        mx = np.max(integrand, axis=1)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        integrand -= mx[:, None]
        np.exp(integrand, out=integrand)
        ll = mx + np.log(integrand.sum(axis=1))
        return ll + 0.5 * q * np.log(2.0) + half_logdet

    def _log_survival_factor(self, theta: JointTheta, B: np.ndarray) -> np.ndarray:
        s = self.structure
        gamma_lin = self.W @ theta.gamma                    # (n,)
        alpha = theta.alpha
        Bt = B.transpose(0, 2, 1)                           # (n, q, M)

        if s.form == "shared_re":
            etaT = gamma_lin[:, None] + B @ alpha
            eta0 = etaT
            etaQ = None
        else:
            fT = (self.AxT @ theta.beta)[:, :, None] + self.AzT @ Bt   # (n, A, M)
            etaT = gamma_lin[:, None] + np.einsum("a,nam->nm", alpha, fT)
            f0 = (self.Ax0 @ theta.beta)[:, :, None] + self.Az0 @ Bt
            eta0 = gamma_lin[:, None] + np.einsum("a,nam->nm", alpha, f0)
            if s.n_assoc == 1:
                fx = (self.AxQ[:, :, 0, :] @ theta.beta)                # (n, NQ)
                etaQ = self.AzQ[:, :, 0, :] @ Bt                        # (n, NQ, M)
                etaQ *= alpha[0]
                etaQ += (alpha[0] * fx + gamma_lin[:, None])[:, :, None]
            else:
                fx = np.einsum("nkap,p->nka", self.AxQ, theta.beta)
                axz = np.einsum("a,nkaq->nkq", alpha, self.AzQ)
                etaQ = axz @ Bt
                etaQ += (fx @ alpha + gamma_lin[:, None])[:, :, None]

        if s.baseline.kind == "weibull":
            st = theta.sigma_t
            log_h0_T = np.log(st) + (st - 1.0) * self.log_T
            exp0 = np.exp(np.minimum(eta0, EXP_CLIP))
            H = exp0 * (self.T ** st)[:, None]
            if etaQ is not None:
                h0q = st * np.exp((st - 1.0) * self.log_sq) * self.wq   # (n, NQ)
                np.minimum(etaQ, EXP_CLIP, out=etaQ)
                np.exp(etaQ, out=etaQ)
                etaQ -= exp0[:, None, :]
                H = H + (h0q[:, None, :] @ etaQ)[:, 0, :]
        else:
            log_h0_T = self.BhT @ theta.gamma_h0
            if etaQ is None:
                etaQ = np.broadcast_to(eta0[:, None, :], (self.n, self.NQ, self.M)).copy()
            etaQ += (self.BhQ @ theta.gamma_h0)[:, :, None]
            np.minimum(etaQ, EXP_CLIP, out=etaQ)
            np.exp(etaQ, out=etaQ)
            H = (self.wq[:, None, :] @ etaQ)[:, 0, :]

        log_h_T = log_h0_T[:, None] + etaT
        return self.delta[:, None] * log_h_T - H


def joint_loglik(theta: JointTheta, dataset: Dataset, structure: JointModelStructure,
                 gh_nodes: int | None = None) -> float:
    """Marginal log-likelihood (adaptive Gauss-Hermite over the random effects)."""
    return JointLikelihood(dataset, structure, gh_nodes).loglik(theta)


# --- fit ----------------------------------------------------------------------

@dataclass
class JointFit:
    """Maximum-likelihood joint fit with observed-information-based covariance."""

    theta: JointTheta
    structure: JointModelStructure = field(repr=False)
    packer: ThetaPacker = field(repr=False)
    loglik: float
    converged: bool
    information: np.ndarray | None = None   # covariance of theta-hat (free coords)
    information_pd: bool = False
    diagonal_D: bool = True
    n_iter: int = 0
    fit_seconds: float = 0.0

    @property
    def labels(self):
        return self.packer.labels

    def coefficient(self, label: str) -> float:
        x = self.packer.pack(self.theta)
        return float(x[self.labels.index(label)])

    def to_dict(self) -> dict:
        return {
            "kind": "joint",
            "theta": self.theta.to_dict(),
            "loglik": self.loglik,
            "converged": self.converged,
            "information": (None if self.information is None
                            else self.information.tolist()),
            "information_pd": self.information_pd,
            "labels": list(self.labels),
            "diagonal_D": self.diagonal_D,
            "structure": self.structure.to_dict(),
            "fit_seconds": self.fit_seconds,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "JointFit":
        structure = JointModelStructure.from_dict(payload["structure"])
        packer = ThetaPacker(structure, bool(payload.get("diagonal_D", True)))
        info = payload.get("information")
        return cls(
            theta=JointTheta.from_dict(payload["theta"]),
            structure=structure,
            packer=packer,
            loglik=float(payload["loglik"]),
            converged=bool(payload["converged"]),
            information=None if info is None else np.asarray(info, dtype=float),
            information_pd=bool(payload.get("information_pd", False)),
            diagonal_D=bool(payload.get("diagonal_D", True)),
            fit_seconds=float(payload.get("fit_seconds", 0.0)),
        )


def _initial_theta(dataset: Dataset, structure: JointModelStructure,
                   config: JointModelConfig) -> JointTheta:
    from .landmark import LandmarkForm, fit_cox, landmark_features

    basis = structure.design.basis
    lmm_fit = fit_lmm(dataset, LmmSpec(basis, config.group_covariate, True,
                                       config.diagonal_D))
    # last-value Cox at t=0 sets the scale of (gamma, alpha)
    gamma = np.zeros(structure.n_gamma)
    alpha = np.zeros(structure.n_assoc)
    n_cov = len(structure.gamma_covariates)
    try:
        rows = landmark_features(dataset, 0.0, LandmarkForm("value"),
                                 covariates=structure.gamma_covariates)
        cox = fit_cox(rows)
        cox_gamma, cox_alpha = cox.gamma, float(cox.alpha[0])
    except Exception:
        cox_gamma, cox_alpha = np.zeros(n_cov), 0.0
    if structure.gamma_has_intercept:
        gamma[1:1 + n_cov] = cox_gamma
    else:
        gamma[:n_cov] = cox_gamma
    mean_T = float(np.mean([s.event_time for s in dataset.subjects]))
    if structure.form in ("value", "weighted_area"):
        alpha[0] = cox_alpha
    elif structure.form == "value_slope":
        alpha[0] = cox_alpha
    elif structure.form == "area":
        alpha[0] = 2.0 * cox_alpha / max(mean_T, 1.0)
    # shared_re starts at zero

    # crude rate intercept for the baseline level at shape 1
    lin = np.zeros(len(dataset.subjects))
    for i, subj in enumerate(dataset.subjects):
        w = structure.w_row(subj)
        lin[i] = w[1:] @ gamma[1:] if structure.gamma_has_intercept else w @ gamma
    T = np.array([s.event_time for s in dataset.subjects])
    d_total = sum(s.status for s in dataset.subjects)
    log_rate = np.log(max(d_total, 0.5) / float(np.sum(T * np.exp(lin))))
    if structure.baseline.kind == "weibull":
        gamma[0] = log_rate
        return JointTheta(lmm_fit.beta, lmm_fit.D, lmm_fit.sigma, gamma, alpha,
                          sigma_t=1.0)
    gamma_h0 = np.zeros(structure.baseline.n_params)
    gamma_h0[0] = log_rate
    return JointTheta(lmm_fit.beta, lmm_fit.D, lmm_fit.sigma, gamma, alpha,
                      gamma_h0=gamma_h0)


def _hessian_of_loglik(f, x0: np.ndarray, h_scale: float = 1e-3) -> np.ndarray:
    """Central cross-difference Hessian (equals central differencing of the
    central-difference gradient with matched steps)."""
    P = len(x0)
    h = h_scale * (1.0 + np.abs(x0))
    H = np.empty((P, P))
    f0 = f(x0)

    def at(dx):
        return f(x0 + dx)

    for j in range(P):
        ej = np.zeros(P)
        ej[j] = h[j]
        fpp = at(2 * ej)
        fmm = at(-2 * ej)
        H[j, j] = (fpp - 2.0 * f0 + fmm) / (4.0 * h[j] ** 2)
    for j in range(P):
        ej = np.zeros(P)
        ej[j] = h[j]
        for k in range(j + 1, P):
            ek = np.zeros(P)
            ek[k] = h[k]
            val = (at(ej + ek) - at(ej - ek) - at(-ej + ek) + at(-ej - ek)) \
                / (4.0 * h[j] * h[k])
            H[j, k] = H[k, j] = val
    return H


def _forward_grad(f, x, f0, h_scale=1e-6):
    g = np.empty_like(x)
    for j in range(len(x)):
        h = h_scale * (1.0 + abs(x[j]))
        xp = x.copy()
        xp[j] += h
        g[j] = (f(xp) - f0) / h
    return g


def _newton_polish(obj, x0, neg_hess, max_steps=40, ftol=1e-9, verbose=False):
    """Newton iterations with a fixed curvature matrix and step halving.

    Converges linearly at a rate set by how well the supplied curvature
    matches the true one; with the coarse-grid Hessian the contraction is
    strong enough that a handful of steps reach the ftol plateau.
    """
    w, V = np.linalg.eigh(0.5 * (neg_hess + neg_hess.T))
    w = np.maximum(w, max(1e-8, 1e-8 * w.max()))
    x, fx = np.asarray(x0, dtype=float), obj(x0)
    for it in range(1, max_steps + 1):
        g = _forward_grad(obj, x, fx)
        step = -V @ ((V.T @ g) / w)
        improved = False
        for _ in range(25):
            x_new = x + step
            f_new = obj(x_new)
            if f_new < fx:
                improved = True
                break
            step *= 0.5
        if not improved:
            return x, fx, it, True  # gradient at the finite-difference floor
        rel = (fx - f_new) / max(abs(fx), 1.0)
        x, fx = x_new, f_new
        if verbose:
            print(f"  polish step {it}: loglik {-fx:.6f} (rel {rel:.2e})")
        if rel < ftol:
            return x, fx, it, True
    return x, fx, max_steps, False


def fit_joint(dataset: Dataset, config: JointModelConfig, max_iter: int = 500,
              compute_information: bool = True, init: JointTheta | None = None,
              verbose: bool = False) -> JointFit:
    """Two-stage ML fit: LMM + Cox initialization, coarse then full AGH grid."""
    t_start = time.time()
    structure = JointModelStructure.from_config(dataset, config)
    packer = ThetaPacker(structure, config.diagonal_D)
    theta0 = init if init is not None else _initial_theta(dataset, structure, config)
    x0 = packer.pack(theta0)

    full = JointLikelihood(dataset, structure, config.gh_nodes)

    def make_obj(lik):
        def obj(x):
            val = lik.loglik(packer.unpack(x))
            return 1e12 if not np.isfinite(val) else -val
        return obj

    n_iter = 0
    fd_step = np.full(len(x0), 1e-6)
    obj = make_obj(full)
    polished = False
    if full.M > 120 and config.gh_nodes is None:
        coarse = full.with_nodes(3)
        res_a = optimize.minimize(
            make_obj(coarse), x0, method="L-BFGS-B", jac="2-point",
            options={"maxiter": 300, "ftol": 1e-9, "gtol": 5e-3,
                     "finite_diff_rel_step": fd_step},
        )
        n_iter += res_a.nit
        if verbose:
            print(f"  coarse stage: {res_a.nit} iters, loglik {-res_a.fun:.4f}")
        # curvature from the coarse grid drives a Newton polish on the full grid
        hess_c = _hessian_of_loglik(lambda x: -make_obj(coarse)(x), res_a.x)
        x_p, f_p, nit_p, polished = _newton_polish(obj, res_a.x, -hess_c,
                                                   max_steps=40, verbose=verbose)
        n_iter += nit_p
        x0 = x_p

    if polished:
        x_hat, f_hat = x0, obj(x0)
        converged = True
    else:
        res = optimize.minimize(
            obj, x0, method="L-BFGS-B", jac="2-point",
            options={"maxiter": max_iter, "ftol": 1e-9, "gtol": 5e-3,
                     "finite_diff_rel_step": fd_step},
        )
        n_iter += res.nit
        x_hat, f_hat = res.x, res.fun
        converged = bool(res.success or res.status == 0)
    theta_hat = packer.unpack(x_hat)
    loglik = -f_hat
    converged = converged and n_iter <= max_iter + 340
    res_x = x_hat

    information = None
    information_pd = False
    if compute_information:
        hess = _hessian_of_loglik(lambda x: -obj(x), res_x)
        neg_hess = -0.5 * (hess + hess.T)
        try:
            c = cho_factor(neg_hess)
            information = cho_solve(c, np.eye(len(res_x)))
            information = 0.5 * (information + information.T)
            information_pd = True
        except np.linalg.LinAlgError:
            information = np.linalg.pinv(neg_hess)
            information_pd = False

    return JointFit(
        theta=theta_hat,
        structure=structure,
        packer=packer,
        loglik=float(loglik),
        converged=converged,
        information=information,
        information_pd=information_pd,
        diagonal_D=config.diagonal_D,
        n_iter=n_iter,
        fit_seconds=time.time() - t_start,
    )
