"""Landmark analysis: features at the landmark, Cox/Weibull fits on the
adjusted risk set with reset time, and conditional survival predictions.

All fitting happens on the reset scale s = T - t for subjects with T > t.
The semiparametric route estimates the cumulative baseline hazard with the
Breslow step estimator; the parametric route (used by the simulation
benchmark) assumes a Weibull baseline with its log scale carried by an
intercept.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import Dataset, SubjectRecord, risk_set
from .errors import DataError, NumericalError, SpecificationError

LANDMARK_FORMS = ("value", "value_slope", "area")


@dataclass(frozen=True)
class LandmarkForm:
    kind: str

    def __post_init__(self):
        if self.kind not in LANDMARK_FORMS:
            raise SpecificationError(
                f"no landmark analog for form {self.kind!r}; choose one of "
                f"{LANDMARK_FORMS}"
            )

    @property
    def n_features(self) -> int:
        return 2 if self.kind == "value_slope" else 1


def marker_features(subject: SubjectRecord, t: float, form: LandmarkForm) -> np.ndarray:
    """Landmark marker features from the observation history at or before t.

    value: last observed value carried forward. value_slope adds the slope of
    the last two observations (0 with a single observation). area integrates
    the left-continuous step function of observed values over [0, t], with
    the first value carried back to 0 and the last extended to t.
    """
    hist = subject.history_until(t)
    if not hist:
        raise DataError(
            f"subject {subject.subject_id}: no observation at or before t={t}"
        )
    times = np.array([o.time for o in hist])
    values = np.array([o.value for o in hist])
    if form.kind == "value":
        return np.array([values[-1]])
    if form.kind == "value_slope":
        if len(hist) == 1:
            slope = 0.0
        else:
            slope = (values[-1] - values[-2]) / (times[-1] - times[-2])
        return np.array([values[-1], slope])
    edges = np.concatenate([[0.0], times[1:], [t]])
    return np.array([float(np.sum(values * np.diff(edges)))])


def feature_names(form: LandmarkForm) -> list[str]:
    if form.kind == "value":
        return ["y_last"]
    if form.kind == "value_slope":
        return ["y_last", "y_slope"]
    return ["y_area"]


@dataclass
class LandmarkData:
    """Reset-time rows for the adjusted risk set at a landmark time."""

    landmark_time: float
    form: LandmarkForm
    subject_ids: list[str]
    reset_times: np.ndarray
    status: np.ndarray
    X: np.ndarray
    columns: list[str]

    @property
    def n_covariates(self) -> int:
        return len(self.columns) - self.form.n_features


def landmark_features(dataset: Dataset, t: float, form: LandmarkForm,
                      covariates: tuple[str, ...] | None = None) -> LandmarkData:
    """Assemble (T_i - t, delta_i, w_i, features_i) over risk_set(dataset, t)."""
    ids = sorted(risk_set(dataset, t), key=lambda sid: dataset._index[sid])
    if not ids:
        raise DataError(f"empty risk set at landmark t={t}")
    cov_names = tuple(covariates) if covariates is not None else dataset.covariate_names
    rows, s_list, d_list = [], [], []
    for sid in ids:
        subj = dataset.subject(sid)
        feats = marker_features(subj, t, form)
        rows.append([subj.covariates[c] for c in cov_names] + list(feats))
        s_list.append(subj.event_time - t)
        d_list.append(float(subj.status))
    return LandmarkData(
        landmark_time=t,
        form=form,
        subject_ids=ids,
        reset_times=np.array(s_list),
        status=np.array(d_list),
        X=np.array(rows, dtype=float),
        columns=list(cov_names) + feature_names(form),
    )


# --- Cox partial likelihood (Breslow ties) ------------------------------------

@dataclass
class CoxFit:
    """Cox fit on the reset scale with a Breslow baseline."""

    gamma: np.ndarray
    alpha: np.ndarray
    baseline_times: np.ndarray
    baseline_increments: np.ndarray
    landmark_time: float
    form: LandmarkForm
    columns: list[str]
    loglik: float
    converged: bool

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.alpha])

    def to_dict(self) -> dict:
        return {
            "kind": "landmark_cox",
            "gamma": self.gamma.tolist(),
            "alpha": self.alpha.tolist(),
            "baseline": {
                "times": self.baseline_times.tolist(),
                "increments": self.baseline_increments.tolist(),
            },
            "landmark_time": self.landmark_time,
            "form": self.form.kind,
            "columns": list(self.columns),
            "loglik": self.loglik,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CoxFit":
        return cls(
            gamma=np.asarray(payload["gamma"], dtype=float),
            alpha=np.asarray(payload["alpha"], dtype=float),
            baseline_times=np.asarray(payload["baseline"]["times"], dtype=float),
            baseline_increments=np.asarray(payload["baseline"]["increments"], dtype=float),
            landmark_time=float(payload["landmark_time"]),
            form=LandmarkForm(payload["form"]),
            columns=list(payload["columns"]),
            loglik=float(payload["loglik"]),
            converged=bool(payload["converged"]),
        )


def _partial_loglik_parts(beta, s, d, X):
    """Breslow log partial likelihood with gradient and Hessian."""
    order = np.argsort(-s, kind="stable")  # decreasing reset time
    s_o, d_o, X_o = s[order], d[order], X[order]
    eta = X_o @ beta
    eta_shift = eta - eta.max()
    w = np.exp(eta_shift)
    cum_w = np.cumsum(w)
    cum_wx = np.cumsum(w[:, None] * X_o, axis=0)
    cum_wxx = np.cumsum(w[:, None, None] * (X_o[:, :, None] * X_o[:, None, :]), axis=0)

    # risk set of an event at s_i: all rows with s >= s_i => prefix in this order,
    # extended over ties (equal s must share the full risk set)
    last_same = np.searchsorted(-s_o, -s_o, side="right") - 1
    ll, grad, hess = 0.0, np.zeros(X.shape[1]), np.zeros((X.shape[1], X.shape[1]))
    for i in np.where(d_o == 1)[0]:
        k = last_same[i]
        W = cum_w[k]
        xbar = cum_wx[k] / W
        ll += eta_shift[i] - np.log(W)
        grad += X_o[i] - xbar
        hess -= cum_wxx[k] / W - np.outer(xbar, xbar)
    return ll, grad, hess


def fit_cox(data: LandmarkData, max_iter: int = 200, tol: float = 1e-9) -> CoxFit:
    """Newton-Raphson maximization of the Breslow partial likelihood."""
    s, d, X = data.reset_times, data.status, data.X
    if d.sum() == 0:
        raise DataError("no events in the landmark dataset")
    sd = X.std(axis=0)
    flat = [data.columns[j] for j in range(X.shape[1]) if sd[j] == 0.0]
    if flat:
        raise NumericalError(f"non-identifiable constant covariate(s): {flat}")

    scale = np.where(sd > 0, sd, 1.0)
    Xs = X / scale
    beta = np.zeros(X.shape[1])
    converged = False
    for _ in range(max_iter):
        ll, grad, hess = _partial_loglik_parts(beta, s, d, Xs)
        if np.max(np.abs(grad)) <= 1e-8 * (1.0 + abs(ll)):
            converged = True
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise NumericalError("singular information matrix; covariates collinear")
        # step-halving keeps the likelihood monotone
        for _ in range(30):
            ll_new, _, _ = _partial_loglik_parts(beta + step, s, d, Xs)
            if ll_new >= ll - 1e-12:
                break
            step *= 0.5
        beta = beta + step
        if np.max(np.abs(beta)) > 1e3:
            break  # monotone likelihood; flag below
    beta_nat = beta / scale
    ll, grad, _ = _partial_loglik_parts(beta_nat, s, d, X)

    eta = X @ beta_nat
    times, increments = _breslow_increments(s, d, eta)
    n_cov = data.n_covariates
    return CoxFit(
        gamma=beta_nat[:n_cov],
        alpha=beta_nat[n_cov:],
        baseline_times=times,
        baseline_increments=increments,
        landmark_time=data.landmark_time,
        form=data.form,
        columns=list(data.columns),
        loglik=float(ll),
        converged=converged,
    )


def _breslow_increments(s, d, eta):
    w = np.exp(eta - eta.max())
    scale_back = np.exp(eta.max())
    out_t, out_dh = [], []
    for sk in np.unique(s[d == 1]):
        dk = np.sum((s == sk) & (d == 1))
        denom = np.sum(w[s >= sk]) * scale_back
        out_t.append(sk)
        out_dh.append(dk / denom)
    return np.array(out_t), np.array(out_dh)


def breslow_cumhaz(fit: CoxFit, s) -> np.ndarray | float:
    """Breslow cumulative baseline hazard at reset time(s) s (right continuous)."""
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(s_arr < 0):
        raise ValueError("reset time must be >= 0")
    idx = np.searchsorted(fit.baseline_times, s_arr, side="right")
    csum = np.concatenate([[0.0], np.cumsum(fit.baseline_increments)])
    out = csum[idx]
    return float(out[0]) if np.ndim(s) == 0 else out


def predict_lm(fit: CoxFit, row: np.ndarray, u) -> np.ndarray | float:
    """pi^LM(u | t) = exp(-H0(u - t) exp(coef'row)) for horizons u >= t."""
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(u_arr < fit.landmark_time):
        raise ValueError("prediction horizon must satisfy u >= landmark time")
    lin = float(np.dot(fit.coef, row))
    out = np.exp(-breslow_cumhaz(fit, u_arr - fit.landmark_time) * np.exp(lin))
    return float(out[0]) if np.ndim(u) == 0 else out


# --- parametric Weibull landmark fit (benchmark route) -------------------------

@dataclass
class WeibullPHFit:
    """Weibull proportional-hazards fit on the reset scale.

    h(s) = sigma_t s^(sigma_t - 1) exp(gamma0 + coef'x); gamma0 is the log
    scale parameter.
    """

    gamma0: float
    gamma: np.ndarray
    alpha: np.ndarray
    sigma_t: float
    landmark_time: float
    form: LandmarkForm
    columns: list[str]
    loglik: float
    converged: bool

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.alpha])

    def to_dict(self) -> dict:
        return {
            "kind": "landmark_weibull",
            "gamma0": self.gamma0,
            "gamma": self.gamma.tolist(),
            "alpha": self.alpha.tolist(),
            "sigma_t": self.sigma_t,
            "landmark_time": self.landmark_time,
            "form": self.form.kind,
            "columns": list(self.columns),
            "loglik": self.loglik,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "WeibullPHFit":
        return cls(
            gamma0=float(payload["gamma0"]),
            gamma=np.asarray(payload["gamma"], dtype=float),
            alpha=np.asarray(payload["alpha"], dtype=float),
            sigma_t=float(payload["sigma_t"]),
            landmark_time=float(payload["landmark_time"]),
            form=LandmarkForm(payload["form"]),
            columns=list(payload["columns"]),
            loglik=float(payload["loglik"]),
            converged=bool(payload["converged"]),
        )


def fit_weibull_ph(data: LandmarkData, max_iter: int = 500) -> WeibullPHFit:
    """Full-likelihood Weibull PH fit with analytic gradient."""
    s, d, X = data.reset_times, data.status, data.X
    if d.sum() == 0:
        raise DataError("no events in the landmark dataset")
    log_s = np.log(s)
    n, k = X.shape
    sd = X.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    Xs = X / scale

    def negloglik_grad(par):
        g0, coef, log_st = par[0], par[1:1 + k], par[-1]
        st = np.exp(log_st)
        eta = g0 + Xs @ coef
        logH = st * log_s + eta
        logH = np.clip(logH, -700.0, 700.0)
        H = np.exp(logH)
        ll = np.sum(d * (log_st + (st - 1.0) * log_s + eta)) - np.sum(H)
        dg0 = np.sum(d - H)
        dcoef = Xs.T @ (d - H)
        dlst = np.sum(d * (1.0 + st * log_s)) - np.sum(H * st * log_s)
        return -ll, -np.concatenate([[dg0], dcoef, [dlst]])

    rate0 = np.log(max(d.sum(), 0.5) / np.sum(s))
    x0 = np.concatenate([[rate0], np.zeros(k), [0.0]])
    res = optimize.minimize(
        negloglik_grad, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9},
    )
    g0, coef, log_st = res.x[0], res.x[1:1 + k] / scale, res.x[-1]
    n_cov = data.n_covariates
    return WeibullPHFit(
        gamma0=float(g0),
        gamma=coef[:n_cov],
        alpha=coef[n_cov:],
        sigma_t=float(np.exp(log_st)),
        landmark_time=data.landmark_time,
        form=data.form,
        columns=list(data.columns),
        loglik=float(-res.fun),
        converged=bool(res.success),
    )


def predict_lm_weibull(fit: WeibullPHFit, row: np.ndarray, u) -> np.ndarray | float:
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(u_arr < fit.landmark_time):
        raise ValueError("prediction horizon must satisfy u >= landmark time")
    lin = fit.gamma0 + float(np.dot(fit.coef, row))
    out = np.exp(-np.power(u_arr - fit.landmark_time, fit.sigma_t) * np.exp(lin))
    return float(out[0]) if np.ndim(u) == 0 else out


def subject_row(fit, subject: SubjectRecord, t: float | None = None) -> np.ndarray:
    """Covariate+feature row for a subject, matching a fitted model's columns."""
    t_lm = fit.landmark_time if t is None else t
    feats = marker_features(subject, t_lm, fit.form)
    n_cov = len(fit.columns) - fit.form.n_features
    covs = [subject.covariates[c] for c in fit.columns[:n_cov]]
    return np.array(covs + list(feats), dtype=float)
