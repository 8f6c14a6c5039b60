"""Monte Carlo dynamic predictions pi_hat(u | t) from a fitted joint model.

Three steps per draw k: sample theta from the asymptotic normal posterior
N(theta_hat, H_n); sample the subject's random effects from their posterior
conditioned on the marker history through t AND survival past t (independence
Metropolis with a multivariate-t proposal centered at the conditioned mode);
average the per-draw conditional survival ratios S(u)/S(t).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky as sp_cholesky

from .data import Dataset, LongitudinalObservation, SubjectRecord
from .errors import DataError
from .jointmodel import EXP_CLIP, JointFit, JointTheta
from .numerics.quadrature import panel_points
from .rng import substream

MH_ROUNDS = 5
PROPOSAL_DF = 4.0
DEFAULT_DRAWS = 200


@dataclass(frozen=True)
class NewSubject:
    """A prediction target: covariates plus marker history through the landmark."""

    covariates: dict[str, float]
    times: tuple[float, ...]
    values: tuple[float, ...]
    landmark: float

    def __post_init__(self):
        if len(self.times) == 0:
            raise DataError("new subject needs at least one observation")
        if len(self.times) != len(self.values):
            raise DataError("times and values must have equal length")
        if any(t2 <= t1 for t1, t2 in zip(self.times, self.times[1:])):
            raise DataError("observation times must be strictly increasing")
        if self.landmark < self.times[-1]:
            raise DataError("landmark must be at or after the last observation")

    @classmethod
    def from_record(cls, record: SubjectRecord, landmark: float) -> "NewSubject":
        hist = record.history_until(landmark)
        if not hist:
            raise DataError(
                f"subject {record.subject_id}: no observation at or before {landmark}"
            )
        return cls(
            covariates=dict(record.covariates),
            times=tuple(o.time for o in hist),
            values=tuple(o.value for o in hist),
            landmark=landmark,
        )


@dataclass
class DynamicPrediction:
    """Point estimates and percentile bands of pi_hat over a horizon grid."""

    landmark: float
    horizons: np.ndarray
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_draws: int
    seed: int
    degenerate_theta: bool = False
    mh_acceptance: float = float("nan")

    def rows(self):
        return [
            {"u": float(u), "pi_hat": float(p), "lo": float(lo), "hi": float(hi)}
            for u, p, lo, hi in zip(self.horizons, self.point, self.lower, self.upper)
        ]


def sample_theta(fit: JointFit, K: int, seed: int) -> tuple[list[JointTheta], bool]:
    """K draws from N(theta_hat, H_n) in the free coordinates.

    Returns (draws, degenerate); degenerate draws repeat theta_hat when the
    stored covariance is absent or not positive definite.
    """
    x_hat = fit.packer.pack(fit.theta)
    if fit.information is None or not fit.information_pd:
        return [fit.theta] * K, True
    try:
        L = sp_cholesky(fit.information, lower=True)
    except np.linalg.LinAlgError:
        return [fit.theta] * K, True
    z = substream(seed, "theta").standard_normal((K, len(x_hat)))
    draws = x_hat[None, :] + z @ L.T
    return [fit.packer.unpack(d) for d in draws], False


class _BatchPredictor:
    """Vectorized draw engine for a set of subjects sharing one landmark time."""

    def __init__(self, fit: JointFit, subjects: list[NewSubject], t: float,
                 eval_times, survival_conditioning: bool = True):
        structure = fit.structure
        design = structure.design
        self.fit = fit
        self.structure = structure
        self.t = float(t)
        self.survival_conditioning = survival_conditioning
        n = len(subjects)
        self.n = n
        q, p = structure.q, structure.p

        max_obs = max(len(s.times) for s in subjects)
        self.Y = np.zeros((n, max_obs))
        self.X = np.zeros((n, max_obs, p))
        self.Z = np.zeros((n, max_obs, q))
        self.mask = np.zeros((n, max_obs))
        self.n_i = np.zeros(n)
        self.W = np.zeros((n, structure.n_gamma))
        self.group = np.zeros(n, dtype=int)
        for i, subj in enumerate(subjects):
            rec = SubjectRecord(
                subject_id=f"probe{i}",
                covariates=dict(subj.covariates),
                event_time=max(subj.landmark, 1e-9) + 1.0,
                status=0,
                observations=tuple(
                    LongitudinalObservation(f"probe{i}", tt, vv)
                    for tt, vv in zip(subj.times, subj.values)
                ),
            )
            g = design.group_index(rec)
            times = np.asarray(subj.times)
            k = len(times)
            self.group[i] = g
            self.Y[i, :k] = subj.values
            self.X[i, :k] = design.x_rows(times, g)
            self.Z[i, :k] = design.z_rows(times)
            self.mask[i, :k] = 1.0
            self.n_i[i] = k
            self.W[i] = structure.w_row(rec)
        self.ZtZ = np.einsum("nlq,nlr->nqr", self.Z, self.Z)

        self.groups_present = sorted(set(self.group.tolist()))
        self.eval_times = [float(u) for u in eval_times]
        self._quads = {}
        for u in set(self.eval_times) | {self.t}:
            self._quad_for(u)

    def _quad_for(self, upto: float):
        upto = float(upto)
        if upto not in self._quads:
            self._quads[upto] = self._build_quad(upto)
        return self._quads[upto]

    def _build_quad(self, upto: float):
        structure = self.structure
        if upto <= 0.0:
            return None
        cuts = [c for c in structure.quad_cuts() if c < upto]
        nodes, weights = panel_points(0.0, upto, cuts)
        per_group = {}
        for g in self.groups_present:
            AxQ, AzQ = structure.assoc_rows(nodes, g)           # (NQ, A, p/q)
            Ax0, Az0 = structure.assoc_rows(0.0, g)
            per_group[g] = (AxQ, AzQ, Ax0[0], Az0[0])
        return {"nodes": nodes, "weights": weights, "per_group": per_group,
                "log_nodes": np.log(np.maximum(nodes, 1e-300))}

    # -- per-theta quantities ---------------------------------------------

    def _survival_pieces(self, theta: JointTheta, upto: float):
        """b-independent pieces of H(upto | b) for each subject."""
        quad = self._quad_for(upto)
        structure = self.structure
        alpha = theta.alpha
        n = self.n
        NQ = len(quad["nodes"])
        cx = np.zeros((n, NQ))       # alpha-weighted fixed part at nodes
        gz = np.zeros((n, NQ, structure.q))  # alpha-weighted random rows
        c0 = np.zeros(n)
        g0 = np.zeros((n, structure.q))
        for g in self.groups_present:
            rows = np.where(self.group == g)[0]
            AxQ, AzQ, Ax0, Az0 = quad["per_group"][g]
            cx[rows] = (AxQ @ theta.beta) @ alpha
            gz[rows] = np.einsum("a,kaq->kq", alpha, AzQ)
            c0[rows] = (Ax0 @ theta.beta) @ alpha
            g0[rows] = alpha @ Az0
        gamma_lin = self.W @ theta.gamma
        if structure.baseline.kind == "weibull":
            st = theta.sigma_t
            h0w = quad["weights"] * st * np.exp((st - 1.0) * quad["log_nodes"])
            pow_t = upto ** st
        else:
            h0w = quad["weights"] * np.exp(
                structure.baseline.design(quad["nodes"]) @ theta.gamma_h0)
            pow_t = None
        return {
            "cx": cx + gamma_lin[:, None],
            "gz": gz,
            "c0": c0 + gamma_lin,
            "g0": g0,
            "h0w": h0w,
            "pow_t": pow_t,
        }

    @staticmethod
    def _cum_haz(pieces, b):
        """H(upto | b) for all subjects; b is (n, q); h0w has shape (NQ,)."""
        eta = pieces["cx"] + np.einsum("nkq,nq->nk", pieces["gz"], b)
        np.minimum(eta, EXP_CLIP, out=eta)
        if pieces["pow_t"] is not None:
            eta0 = np.minimum(pieces["c0"] + np.einsum("nq,nq->n", pieces["g0"], b),
                              EXP_CLIP)
            e0 = np.exp(eta0)
            return e0 * pieces["pow_t"] + (np.exp(eta) - e0[:, None]) @ pieces["h0w"]
        return np.exp(eta) @ pieces["h0w"]

    @staticmethod
    def _cum_haz_grad_hess(pieces, b):
        """(H, dH/db, d2H/db2) batched over subjects."""
        gz = pieces["gz"]
        eta = pieces["cx"] + np.einsum("nkq,nq->nk", gz, b)
        np.minimum(eta, EXP_CLIP, out=eta)
        wh = np.exp(eta) * pieces["h0w"][None, :]            # (n, NQ)
        grad = np.einsum("nk,nkq->nq", wh, gz)
        hess = np.einsum("nk,nkq,nkr->nqr", wh, gz, gz)
        H = wh.sum(axis=1)
        if pieces["pow_t"] is not None:
            eta0 = np.minimum(pieces["c0"] + np.einsum("nq,nq->n", pieces["g0"], b),
                              EXP_CLIP)
            e0 = np.exp(eta0)
            g0 = pieces["g0"]
            # residual of the closed-form piece minus its quadrature image
            c = e0 * (pieces["pow_t"] - np.sum(pieces["h0w"]))
            H = H + c
            grad = grad + c[:, None] * g0
            hess = hess + c[:, None, None] * np.einsum("nq,nr->nqr", g0, g0)
        return H, grad, hess

    # -- conditioned posterior over b --------------------------------------

    def _log_target(self, theta: JointTheta, lin_pieces, b):
        sigma2 = theta.sigma ** 2
        r = (self.Y - self.X @ theta.beta) * self.mask - \
            np.einsum("nlq,nq->nl", self.Z, b) * self.mask
        lly = -0.5 * np.sum(r * r, axis=1) / sigma2 \
            - 0.5 * self.n_i * np.log(2.0 * math.pi * sigma2)
        Dchol = np.linalg.cholesky(theta.D)
        v = np.linalg.solve(Dchol, b.T).T
        lpb = -0.5 * np.sum(v * v, axis=1) \
            - np.sum(np.log(np.diag(Dchol))) - 0.5 * len(Dchol) * np.log(2.0 * math.pi)
        out = lly + lpb
        if self.survival_conditioning and lin_pieces is not None:
            out = out - self._cum_haz(lin_pieces, b)
        return out

    def _conditioned_mode(self, theta: JointTheta, lin_pieces):
        """Newton mode/curvature of the survival-conditioned posterior."""
        sigma2 = theta.sigma ** 2
        D_inv = np.linalg.inv(theta.D)
        resid0 = (self.Y - self.X @ theta.beta) * self.mask
        prec_long = self.ZtZ / sigma2 + D_inv
        rhs = np.einsum("nlq,nl->nq", self.Z, resid0) / sigma2
        b = np.linalg.solve(prec_long, rhs[..., None])[..., 0]
        if not (self.survival_conditioning and lin_pieces is not None):
            return b, prec_long, 0
        lp = self._log_target(theta, lin_pieces, b)
        n_fallback = 0
        for _ in range(50):
            _, gH, hH = self._cum_haz_grad_hess(lin_pieces, b)
            grad = rhs - np.einsum("nqr,nr->nq", prec_long, b) - gH
            if np.max(np.abs(grad)) < 1e-9 * (1.0 + np.max(np.abs(lp))):
                break
            curv = prec_long + hH
            try:
                step = np.linalg.solve(curv, grad[..., None])[..., 0]
            except np.linalg.LinAlgError:
                n_fallback = self.n
                break
            for _ in range(20):
                b_try = b + step
                lp_try = self._log_target(theta, lin_pieces, b_try)
                worse = lp_try < lp - 1e-12
                if not np.any(worse):
                    break
                step[worse] *= 0.5
            improved = lp_try >= lp - 1e-12
            b = np.where(improved[:, None], b_try, b)
            lp = np.maximum(lp, lp_try)
            if np.max(np.abs(step)) < 1e-10:
                break
        _, _, hH = self._cum_haz_grad_hess(lin_pieces, b)
        curv = prec_long + hH
        return b, curv, n_fallback

    def draw_b(self, theta: JointTheta, rng) -> tuple[np.ndarray, float]:
        """One survival-conditioned draw per subject (independence Metropolis)."""
        q = self.structure.q
        pieces = self._survival_pieces(theta, self.t) if self.t > 0 else None
        mode, curv, _ = self._conditioned_mode(theta, pieces)
        try:
            scale = np.linalg.cholesky(np.linalg.inv(curv))
        except np.linalg.LinAlgError:
            scale = np.linalg.cholesky(np.linalg.inv(
                self.ZtZ / theta.sigma ** 2 + np.linalg.inv(theta.D)))

        def log_proposal(b):
            dev = b - mode
            m = np.linalg.solve(scale, dev[..., None])[..., 0]
            m2 = np.sum(m * m, axis=1)
            logdet = np.log(np.abs(np.diagonal(scale, axis1=1, axis2=2))).sum(axis=1)
            return (-0.5 * (PROPOSAL_DF + q)
                    * np.log1p(m2 / PROPOSAL_DF) - logdet)

        current = mode.copy()
        lp_cur = self._log_target(theta, pieces, current)
        lq_cur = log_proposal(current)
        accepted = 0
        for _ in range(MH_ROUNDS):
            z = rng.standard_normal((self.n, q))
            chi = rng.chisquare(PROPOSAL_DF, size=self.n) / PROPOSAL_DF
            prop = mode + np.einsum("nqr,nr->nq", scale, z) / np.sqrt(chi)[:, None]
            lp_prop = self._log_target(theta, pieces, prop)
            lq_prop = log_proposal(prop)
            log_ratio = (lp_prop - lp_cur) - (lq_prop - lq_cur)
            take = np.log(rng.uniform(size=self.n)) < log_ratio
            accepted += int(np.sum(take))
            current[take] = prop[take]
            lp_cur = np.where(take, lp_prop, lp_cur)
            lq_cur = np.where(take, lq_prop, lq_cur)
        return current, accepted / (self.n * MH_ROUNDS)

    def cum_haz_at(self, theta: JointTheta, b: np.ndarray, upto: float) -> np.ndarray:
        if upto <= 0.0:
            return np.zeros(self.n)
        return self._cum_haz(self._survival_pieces(theta, float(upto)), b)

    def conditional_ratios(self, theta: JointTheta, b: np.ndarray) -> np.ndarray:
        """S(u | b) / S(t | b) for each subject and evaluation horizon."""
        H_t = self.cum_haz_at(theta, b, self.t)
        out = np.empty((self.n, len(self.eval_times)))
        for j, u in enumerate(self.eval_times):
            if u <= 0.0 or u == self.t:
                out[:, j] = 1.0
            else:
                out[:, j] = np.exp(-(self.cum_haz_at(theta, b, u) - H_t))
        return out


def predict_jm_matrix(fit: JointFit, subjects: list[NewSubject], t: float,
                      horizons, K: int = DEFAULT_DRAWS, seed: int = 0,
                      survival_conditioning: bool = True):
    """Monte Carlo pi_hat for many subjects on a shared horizon grid.

    Returns (ratios, diagnostics) where ratios has shape (K, n_subjects,
    n_horizons).
    """
    horizons = [float(u) for u in np.atleast_1d(horizons)]
    if any(u < t for u in horizons):
        raise ValueError("prediction horizons must satisfy u >= t")
    thetas, degenerate = sample_theta(fit, K, seed)
    engine = _BatchPredictor(fit, subjects, t, horizons, survival_conditioning)
    ratios = np.empty((K, engine.n, len(horizons)))
    acc = 0.0
    for k, theta_k in enumerate(thetas):
        rng = substream(seed, "draw", k)
        b_k, acc_k = engine.draw_b(theta_k, rng)
        acc += acc_k
        ratios[k] = engine.conditional_ratios(theta_k, b_k)
    diagnostics = {"degenerate_theta": degenerate, "mh_acceptance": acc / max(K, 1)}
    return ratios, diagnostics


def predict_jm(fit: JointFit, subject: NewSubject, horizons, K: int = DEFAULT_DRAWS,
               seed: int = 0, survival_conditioning: bool = True) -> DynamicPrediction:
    """Dynamic prediction for one subject: point estimate and percentile bands."""
    t = subject.landmark
    ratios, diag = predict_jm_matrix(fit, [subject], t, horizons, K, seed,
                                     survival_conditioning)
    r = ratios[:, 0, :]
    return DynamicPrediction(
        landmark=t,
        horizons=np.atleast_1d(np.asarray(horizons, dtype=float)),
        point=r.mean(axis=0),
        lower=np.percentile(r, 2.5, axis=0),
        upper=np.percentile(r, 97.5, axis=0),
        n_draws=K,
        seed=seed,
        degenerate_theta=diag["degenerate_theta"],
        mh_acceptance=diag["mh_acceptance"],
    )
