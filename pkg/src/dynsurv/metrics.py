"""Dynamic discrimination and calibration estimators.

All estimators consume a predictor handle exposing
``predict(subjects, t, u) -> pi_hat array``; landmark and joint-model
predictors implement it below, so every metric applies to both families.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .dynpred import DEFAULT_DRAWS, NewSubject, _BatchPredictor, sample_theta
from .errors import DataError, UndefinedMetricError
from .jointmodel import JointFit
from .landmark import (
    CoxFit,
    LandmarkForm,
    WeibullPHFit,
    fit_cox,
    fit_weibull_ph,
    landmark_features,
    predict_lm,
    predict_lm_weibull,
    subject_row,
)
from .numerics.quadrature import gk15_points
from .rng import substream

logger = logging.getLogger(__name__)

LOSSES = ("absolute", "square")


def _loss(kind: str):
    if kind == "absolute":
        return np.abs
    if kind == "square":
        return np.square
    raise ValueError(f"unknown loss {kind!r}; choose from {LOSSES}")


# --- Kaplan-Meier --------------------------------------------------------------

@dataclass(frozen=True)
class StepSurvival:
    """Right-continuous nonincreasing step function starting at 1."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, t_arr, side="right")
        vals = np.concatenate([[1.0], self.values])[idx]
        return float(vals[0]) if np.ndim(t) == 0 else vals


def kaplan_meier(times, status, target: str = "event") -> StepSurvival:
    """Product-limit estimator; ``target='censoring'`` swaps the status roles.

    Ties are handled by simultaneous multiplication: every subject with
    T >= a is in the risk set of time a regardless of status.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status, dtype=int)
    if len(times) == 0:
        raise DataError("kaplan_meier needs at least one observation")
    if np.any(times <= 0):
        raise DataError("kaplan_meier requires positive times")
    if target == "censoring":
        status = 1 - status
    elif target != "event":
        raise ValueError("target must be 'event' or 'censoring'")
    order = np.argsort(times, kind="stable")
    t_s, d_s = times[order], status[order]
    jump_times, values = [], []
    s = 1.0
    n = len(t_s)
    i = 0
    while i < n:
        a = t_s[i]
        j = i
        deaths = 0
        while j < n and t_s[j] == a:
            deaths += d_s[j]
            j += 1
        if deaths > 0:
            at_risk = n - i
            s *= 1.0 - deaths / at_risk
            jump_times.append(a)
            values.append(s)
        i = j
    return StepSurvival(np.array(jump_times), np.array(values))


def weight_E(survival: StepSurvival, t: float, dt: float) -> float:
    """Probability a random pair is comparable at t: {S(t) - S(t+dt)} S(t+dt)."""
    return (survival(t) - survival(t + dt)) * survival(t + dt)


# --- comparable pairs and AUC ---------------------------------------------------

def comparable_pairs(dataset: Dataset, t: float, dt: float) -> list[tuple[str, str]]:
    """Ordered pairs (case i, control j) comparable at landmark t with window dt."""
    if t < 0 or dt <= 0:
        raise ValueError("comparable_pairs requires t >= 0 and dt > 0")
    hi = t + dt
    cases, controls = [], []
    for s in dataset.subjects:
        if t < s.event_time <= hi and s.status == 1:
            cases.append(s.subject_id)
        if s.event_time > hi or (s.event_time == hi and s.status == 0):
            controls.append(s.subject_id)
    return [(i, j) for i in cases for j in controls if i != j]


def auc_hat(predictor, dataset: Dataset, t: float, dt: float) -> float:
    """Proportion of concordant comparable pairs; ties score 0 (strict)."""
    pairs = comparable_pairs(dataset, t, dt)
    pairs = [
        (i, j) for i, j in pairs
        if dataset.subject(i).history_until(t) and dataset.subject(j).history_until(t)
    ]
    if not pairs:
        raise UndefinedMetricError(f"no comparable pairs at t={t}, dt={dt}")
    involved = sorted({sid for pair in pairs for sid in pair},
                      key=lambda sid: dataset._index[sid])
    subjects = [dataset.subject(sid) for sid in involved]
    pi = predictor.predict(subjects, t, t + dt)
    pi_map = {sid: float(p) for sid, p in zip(involved, pi)}
    concordant = sum(1 for i, j in pairs if pi_map[i] < pi_map[j])
    return concordant / len(pairs)


def c_dyn_hat(predictor, dataset: Dataset, dt: float, t_max: float,
              return_details: bool = False):
    """Weighted average of AUC(t_k, dt) over the 15 rescaled GK abscissas.

    Abscissas with no comparable pairs are dropped from numerator and
    denominator (the AUC is undefined there); each drop is logged.
    """
    if t_max <= 0:
        raise ValueError("c_dyn_hat requires t_max > 0")
    nodes, weights = gk15_points(0.0, t_max)
    km = kaplan_meier(dataset.event_times(), dataset.statuses(), "event")
    num = den = 0.0
    details = []
    for t_k, w_k in zip(nodes, weights):
        pr_e = weight_E(km, t_k, dt)
        try:
            auc_k = auc_hat(predictor, dataset, t_k, dt)
        except UndefinedMetricError:
            logger.info("c_dyn: dropping abscissa t=%.4f (no comparable pairs)", t_k)
            details.append({"t": float(t_k), "included": False})
            continue
        num += w_k * auc_k * pr_e
        den += w_k * pr_e
        details.append({"t": float(t_k), "included": True, "auc": auc_k,
                        "pr_comparable": pr_e})
    if den == 0.0:
        raise UndefinedMetricError("every abscissa lacked comparable pairs")
    value = num / den
    return (value, details) if return_details else value


# --- prediction error -----------------------------------------------------------

def pe_hat(predictor, dataset: Dataset, t: float, u: float,
           loss: str = "absolute") -> float:
    """Censoring-aware expected prediction error at horizon u given history to t."""
    if u <= t:
        raise ValueError("pe_hat requires u > t")
    L = _loss(loss)
    at_risk = [s for s in dataset.subjects if s.event_time >= t]
    if not at_risk:
        raise DataError(f"no subjects at risk at t={t}")
    pi_u = predictor.predict(at_risk, t, u)
    total = 0.0
    for s, pi in zip(at_risk, pi_u):
        if s.event_time >= u:
            total += L(1.0 - pi)
        elif s.status == 1:
            total += L(0.0 - pi)
        else:
            pi_cond = float(predictor.predict([s], s.event_time, u)[0])
            total += pi_cond * L(1.0 - pi) + (1.0 - pi_cond) * L(0.0 - pi)
    return float(total / len(at_risk))


def ipe_hat(predictor, dataset: Dataset, t: float, u: float,
            loss: str = "absolute", literal: bool = False) -> float:
    """Integrated prediction error over event times in [t, u].

    Default reading: a censoring-weighted average of PE(T_i | t) over events
    in the window. With ``literal=True`` the inner term is PE(u | t) for every
    event, which algebraically collapses to pe_hat(u | t).
    """
    events = [s for s in dataset.subjects
              if t <= s.event_time <= u and s.status == 1]
    if not events:
        raise UndefinedMetricError(f"no events in [{t}, {u}]")
    km_c = kaplan_meier(dataset.event_times(), dataset.statuses(), "censoring")
    sc_t = km_c(t)
    num = den = 0.0
    pe_cache: dict[float, float] = {}
    for s in events:
        w = sc_t / km_c(s.event_time)
        if literal:
            pe_val = pe_cache.setdefault(u, pe_hat(predictor, dataset, t, u, loss))
        else:
            horizon = s.event_time
            if horizon <= t:
                continue
            if horizon not in pe_cache:
                pe_cache[horizon] = pe_hat(predictor, dataset, t, horizon, loss)
            pe_val = pe_cache[horizon]
        num += w * pe_val
        den += w
    if den == 0.0:
        raise UndefinedMetricError("all censoring weights vanished")
    return float(num / den)


def r2_measures(measure_m1: float, measure_m2: float) -> float:
    """Explained-variation ratio 1 - M2/M1 between nested models."""
    if measure_m1 == 0.0:
        raise UndefinedMetricError("reference measure is zero")
    return 1.0 - measure_m2 / measure_m1


# --- predictor handles ----------------------------------------------------------

class JointModelPredictor:
    """pi_hat from one joint fit; draws are cached per (landmark, subject set)."""

    def __init__(self, fit: JointFit, K: int = DEFAULT_DRAWS, seed: int = 0,
                 survival_conditioning: bool = True):
        self.fit = fit
        self.K = K
        self.seed = seed
        self.survival_conditioning = survival_conditioning
        self.thetas, self.degenerate = sample_theta(fit, K, seed)
        self._cache = {}

    def _draws_for(self, subjects, t: float):
        key = (float(t), tuple(s.subject_id for s in subjects))
        if key not in self._cache:
            probes = [NewSubject.from_record(s, t) for s in subjects]
            engine = _BatchPredictor(self.fit, probes, t, eval_times=[],
                                     survival_conditioning=self.survival_conditioning)
            b_draws = np.empty((self.K, engine.n, self.fit.structure.q))
            H_t = np.empty((self.K, engine.n))
            for k, theta_k in enumerate(self.thetas):
                rng = substream(self.seed, "b", float(t), k)
                b_draws[k], _ = engine.draw_b(theta_k, rng)
                H_t[k] = (engine.cum_haz_at(theta_k, b_draws[k], t)
                          if t > 0 else 0.0)
            self._cache[key] = (engine, b_draws, H_t)
        return self._cache[key]

    def predict(self, subjects, t: float, u: float) -> np.ndarray:
        engine, b_draws, H_t = self._draws_for(subjects, float(t))
        if u == t:
            return np.ones(len(subjects))
        acc = np.zeros(len(subjects))
        for k, theta_k in enumerate(self.thetas):
            H_u = engine.cum_haz_at(theta_k, b_draws[k], float(u))
            acc += np.exp(-(H_u - H_t[k]))
        return acc / self.K


class LandmarkPredictor:
    """pi_hat from landmark refits; one fit per requested landmark time."""

    def __init__(self, training: Dataset, form: str | LandmarkForm,
                 baseline: str = "breslow",
                 covariates: tuple[str, ...] | None = None):
        if baseline not in ("breslow", "weibull"):
            raise ValueError("baseline must be 'breslow' or 'weibull'")
        self.training = training
        self.form = form if isinstance(form, LandmarkForm) else LandmarkForm(form)
        self.baseline = baseline
        self.covariates = covariates
        self._fits: dict[float, CoxFit | WeibullPHFit] = {}

    def fit_at(self, t: float):
        t = float(t)
        if t not in self._fits:
            data = landmark_features(self.training, t, self.form, self.covariates)
            self._fits[t] = (fit_cox(data) if self.baseline == "breslow"
                             else fit_weibull_ph(data))
        return self._fits[t]

    def predict(self, subjects, t: float, u: float) -> np.ndarray:
        fit = self.fit_at(t)
        pred = predict_lm if self.baseline == "breslow" else predict_lm_weibull
        return np.array([
            pred(fit, subject_row(fit, s), float(u)) for s in subjects
        ])


# --- batched evaluation table ----------------------------------------------------

def evaluate_models(dataset: Dataset, predictors: dict[str, object], t: float,
                    u: float, dt: float, t_max: float,
                    loss: str = "absolute") -> list[dict]:
    """PE, IPE, AUC, and C_dyn for each named predictor, as table rows.

    Metrics that are undefined on this dataset are reported as value None
    with a reason, never silently dropped.
    """
    rows = []

    def add(model, metric, value, window, reason=None):
        rows.append({
            "model": model,
            "metric": metric,
            "t": float(t) if metric in ("pe", "ipe", "auc") else 0.0,
            "window": float(window),
            "value": None if value is None else float(value),
            "reason": reason,
        })

    for name, predictor in predictors.items():
        try:
            add(name, "pe", pe_hat(predictor, dataset, t, u, loss), u)
        except (UndefinedMetricError, DataError) as exc:
            add(name, "pe", None, u, str(exc))
        try:
            add(name, "ipe", ipe_hat(predictor, dataset, t, u, loss), u)
        except (UndefinedMetricError, DataError) as exc:
            add(name, "ipe", None, u, str(exc))
        try:
            add(name, "auc", auc_hat(predictor, dataset, t, dt), dt)
        except (UndefinedMetricError, DataError) as exc:
            add(name, "auc", None, dt, str(exc))
        try:
            add(name, "c_dyn", c_dyn_hat(predictor, dataset, dt, t_max), t_max)
        except (UndefinedMetricError, DataError) as exc:
            add(name, "c_dyn", None, t_max, str(exc))
    return rows
