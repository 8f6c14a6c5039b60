"""Scenario generators, gold-standard probabilities, and the RMSE benchmark.

Four scenarios share one longitudinal truth (natural cubic splines of time
interacted with a two-arm treatment, diagonal random-effects covariance) and
differ in how the marker drives a Weibull-baseline hazard: current value,
value+slope, cumulative area, or the raw random effects. Event times invert
the subject-specific cumulative hazard at an Exp(1) draw; censoring is
uniform on (0, t_c) with t_c calibrated per scenario to give ~45% censoring.
"""

import logging
import math
import multiprocessing
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, LongitudinalObservation, SubjectRecord
from .dynpred import NewSubject, predict_jm
from .errors import DataError, DynsurvError, SpecificationError
from .jointmodel import (
    BaselineSpec,
    JointModelConfig,
    JointModelStructure,
    JointTheta,
    cum_hazard,
    fit_joint,
)
from .landmark import (
    LandmarkForm,
    fit_weibull_ph,
    landmark_features,
    predict_lm_weibull,
    subject_row,
)
from .lmm import TrajectoryDesign
from .numerics import NcsBasis, brent_root
from .numerics.quadrature import panel_points
from .rng import substream

logger = logging.getLogger(__name__)

TREATMENT = "treatment"
MAX_EVENT_TIME = 500.0  # beyond this the subject is treated as event-free

BETA_GROUP0 = (0.93, 0.63, 1.1, 0.54)
BETA_GROUP1 = (-0.6, 0.42, 0.54, 0.55)
D_DIAG = (0.49, 4.52, 2.33, 1.52)
SIGMA = 2.0
BOUNDARY = (0.0, 19.0)
INTERNAL = (2.1, 5.5)
N_MEASUREMENTS = 10  # baseline + nine random follow-up times


@dataclass(frozen=True)
class Scenario:
    """Generating truth for one simulation scenario."""

    id: str
    form: str
    gamma0: float
    gamma1: float
    alpha: tuple[float, ...]
    sigma_t: float
    t_c: float

    @property
    def beta(self) -> np.ndarray:
        return np.array(BETA_GROUP0 + BETA_GROUP1)

    @property
    def D(self) -> np.ndarray:
        return np.diag(D_DIAG)

    def theta(self) -> JointTheta:
        return JointTheta(
            beta=self.beta,
            D=self.D,
            sigma=SIGMA,
            gamma=np.array([self.gamma0, self.gamma1]),
            alpha=np.array(self.alpha, dtype=float),
            sigma_t=self.sigma_t,
        )

    def structure(self) -> JointModelStructure:
        basis = NcsBasis(BOUNDARY, INTERNAL)
        design = TrajectoryDesign(basis, TREATMENT, (0.0, 1.0), random_spline=True)
        return JointModelStructure(design, self.form, BaselineSpec("weibull"),
                                   (TREATMENT,))


# t_c constants are calibrated once by calibrate_censoring (10^4 pilot
# subjects per scenario, target 45%); `dynsurv calibrate-censoring` redoes it.
SCENARIOS: dict[str, Scenario] = {
    "I": Scenario("I", "value", -6.73, 0.41, (0.7,), 1.65, t_c=47.0),
    "II": Scenario("II", "value_slope", -6.73, 0.41, (0.05, 3.3), 1.65, t_c=66.2),
    "III": Scenario("III", "area", -6.73, 0.41, (0.08,), 1.65, t_c=52.9),
    "IV": Scenario("IV", "shared_re", -6.73, 0.41, (-0.3, -0.8, 0.3, 0.8), 1.60,
                   t_c=132.4),
}


def get_scenario(scenario_id: str) -> Scenario:
    try:
        return SCENARIOS[scenario_id]
    except KeyError:
        raise SpecificationError(
            f"unknown scenario {scenario_id!r}; choose from {sorted(SCENARIOS)}"
        ) from None


@dataclass
class SimulationTruth:
    """Generating parameters and per-subject random effects."""

    scenario_id: str
    theta: JointTheta
    b: dict[str, np.ndarray]
    t_c: float

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario_id,
            "theta": self.theta.to_dict(),
            "b": {sid: v.tolist() for sid, v in self.b.items()},
            "t_c": self.t_c,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SimulationTruth":
        return cls(
            scenario_id=payload["scenario"],
            theta=JointTheta.from_dict(payload["theta"]),
            b={sid: np.asarray(v, dtype=float) for sid, v in payload["b"].items()},
            t_c=float(payload["t_c"]),
        )


def _event_grid() -> np.ndarray:
    dense = np.linspace(0.25, 19.0, 40)
    tail = np.geomspace(21.0, MAX_EVENT_TIME, 24)
    return np.concatenate([[1e-9, 0.05, 0.12], dense, tail])


def _grid_cumhaz(structure: JointModelStructure, theta: JointTheta,
                 b_all: np.ndarray, w_all: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Approximate H_i at the grid points for every subject (bracketing only)."""
    cuts = structure.design.basis.internal_knots
    nodes_list, weights_list, seg_id = [], [], []
    for j in range(len(grid) - 1):
        nodes, weights = panel_points(grid[j], grid[j + 1],
                                      [c for c in cuts if grid[j] < c < grid[j + 1]])
        nodes_list.append(nodes)
        weights_list.append(weights)
        seg_id.extend([j] * len(nodes))
    nodes = np.concatenate(nodes_list)
    weights = np.concatenate(weights_list)
    seg_id = np.asarray(seg_id)

    n = b_all.shape[0]
    # the group only re-routes the beta block; handle the arms separately
    eta = np.empty((n, len(nodes)))
    gamma_lin = w_all @ theta.gamma
    for g in range(structure.design.n_groups):
        rows = (np.where(w_all[:, -1].astype(int) == g)[0]
                if structure.design.n_groups == 2 else np.arange(n))
        if len(rows) == 0:
            continue
        Axg, Azg = structure.assoc_rows(nodes, group_index=g)
        f0 = Axg @ theta.beta                     # (K, A)
        fb = np.einsum("kaq,nq->nka", Azg, b_all[rows])
        eta[rows] = gamma_lin[rows, None] + np.einsum(
            "a,nka->nk", theta.alpha, f0[None, :, :] + fb)
    h0 = theta.sigma_t * np.maximum(nodes, 1e-300) ** (theta.sigma_t - 1.0)
    contrib = weights * h0 * np.exp(np.clip(eta, -690, 690))
    seg_sums = np.zeros((n, len(grid) - 1))
    np.add.at(seg_sums.T, seg_id, contrib.T)
    return np.concatenate([np.zeros((n, 1)), np.cumsum(seg_sums, axis=1)], axis=1)


def _invert_event_time(structure, theta, b, w_row, group_index, target, grid,
                       H_grid) -> float:
    """Solve H(T) = target by Brent's method inside a bracketing grid cell."""
    if target > H_grid[-1] * 1.02 + 1e-12:
        hi_exact = cum_hazard(structure, theta, b, w_row, group_index, grid[-1])
        if hi_exact < target:
            return math.inf

    def f(t):
        return cum_hazard(structure, theta, b, w_row, group_index, t) - target

    j = int(np.searchsorted(H_grid, target))
    lo = max(j - 1, 0)
    hi = min(j, len(grid) - 1)
    while lo > 0 and f(grid[lo]) > 0:
        lo -= 1
    while hi < len(grid) - 1 and f(grid[hi]) < 0:
        hi += 1
    if f(grid[hi]) < 0:
        return math.inf
    return brent_root(f, grid[lo], grid[hi], tol=1e-10)


def simulate_dataset(scenario: Scenario, n: int = 300, seed: int = 0,
                     ) -> tuple[Dataset, SimulationTruth]:
    """Generate one dataset: marker histories, event times, uniform censoring."""
    rng = substream(seed, "simulate", scenario.id)
    structure = scenario.structure()
    theta = scenario.theta()
    design = structure.design

    trt = np.arange(n) % 2  # 1:1 assignment
    follow_up = rng.uniform(0.0, BOUNDARY[1], size=(n, N_MEASUREMENTS - 1))
    b_all = rng.standard_normal((n, 4)) * np.sqrt(np.array(D_DIAG))
    eps = rng.standard_normal((n, N_MEASUREMENTS)) * SIGMA
    u_event = rng.uniform(size=n)
    c_all = rng.uniform(0.0, scenario.t_c, size=n)

    w_all = np.column_stack([np.ones(n), trt.astype(float)])
    grid = _event_grid()
    H_grid = _grid_cumhaz(structure, theta, b_all, w_all, grid)
    targets = -np.log(u_event)

    subjects = []
    truth_b = {}
    for i in range(n):
        sid = f"s{i+1:04d}"
        g = int(trt[i])
        t_star = _invert_event_time(structure, theta, b_all[i], w_all[i], g,
                                    targets[i], grid, H_grid[i])
        t_obs = min(t_star, c_all[i])
        delta = int(t_star <= c_all[i])
        times = np.sort(np.concatenate([[0.0], follow_up[i]]))
        keep = times <= t_obs
        times_kept = times[keep]
        x = design.x_rows(times_kept, g)
        z = design.z_rows(times_kept)
        m = x @ theta.beta + z @ b_all[i]
        y = m + eps[i, :len(times_kept)]
        obs = tuple(
            LongitudinalObservation(sid, float(tt), float(yy))
            for tt, yy in zip(times_kept, y)
        )
        subjects.append(SubjectRecord(
            subject_id=sid,
            covariates={TREATMENT: float(trt[i])},
            event_time=float(t_obs),
            status=delta,
            observations=obs,
        ))
        truth_b[sid] = b_all[i]

    dataset = Dataset(tuple(subjects), (TREATMENT,))
    truth = SimulationTruth(scenario.id, theta, truth_b, scenario.t_c)
    return dataset, truth


@dataclass
class GoldRecord:
    """Conditional survival ratios at the generating truth."""

    subject_id: str
    landmark: float
    horizons: np.ndarray
    probabilities: np.ndarray


def gold_standard(scenario: Scenario, b_j: np.ndarray, treatment: float,
                  t: float, horizons) -> GoldRecord:
    """S(u | b, theta) / S(t | b, theta) from the true parameters."""
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    if np.any(horizons < t):
        raise ValueError("gold standard requires horizons >= landmark")
    structure = scenario.structure()
    theta = scenario.theta()
    w_row = np.array([1.0, float(treatment)])
    g = int(treatment)
    H_t = cum_hazard(structure, theta, b_j, w_row, g, t)
    probs = np.array([
        math.exp(-(cum_hazard(structure, theta, b_j, w_row, g, float(u)) - H_t))
        for u in horizons
    ])
    return GoldRecord("", t, horizons, probs)


def calibrate_censoring(scenario: Scenario, target: float = 0.45,
                        n_pilot: int = 10_000, seed: int = 20240901,
                        tol: float = 1e-3) -> float:
    """Bisect t_c so the expected censoring fraction hits the target.

    Given simulated true event times T*, a subject censors with probability
    min(T*/t_c, 1) under C ~ U(0, t_c), so the expected fraction is monotone
    in t_c and can be bisected without re-simulating.
    """
    probe = replace(scenario, t_c=1.0)
    rng = substream(seed, "calibrate", scenario.id)
    structure = probe.structure()
    theta = probe.theta()
    n = n_pilot
    trt = np.arange(n) % 2
    b_all = rng.standard_normal((n, 4)) * np.sqrt(np.array(D_DIAG))
    u_event = rng.uniform(size=n)
    w_all = np.column_stack([np.ones(n), trt.astype(float)])
    grid = _event_grid()
    H_grid = _grid_cumhaz(structure, theta, b_all, w_all, grid)
    targets = -np.log(u_event)
    t_star = np.array([
        _invert_event_time(structure, theta, b_all[i], w_all[i], int(trt[i]),
                           targets[i], grid, H_grid[i])
        for i in range(n)
    ])

    def frac(t_c):
        return float(np.mean(np.minimum(t_star / t_c, 1.0)))

    lo, hi = 1.0, 4000.0
    if frac(hi) > target:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


# --- leave-ten-censored-out benchmark -------------------------------------------

JM_MODELS = {"JM1": "value", "JM2": "value_slope", "JM3": "area", "JM4": "shared_re"}
LM_MODELS = {"LM1": "value", "LM2": "value_slope", "LM3": "area"}
ALL_MODELS = tuple(LM_MODELS) + tuple(JM_MODELS)
N_HOLDOUT = 10
N_HORIZONS = 10
CORRECT_JM = {"I": "JM1", "II": "JM2", "III": "JM3", "IV": "JM4"}


def _derive_seed(seed: int, *parts) -> int:
    return int(substream(seed, *parts).integers(0, 2**63 - 1))


def jm_config(form: str) -> JointModelConfig:
    return JointModelConfig(
        form=form,
        baseline="weibull",
        boundary_knots=BOUNDARY,
        internal_knots=INTERNAL,
        group_covariate=TREATMENT,
        gamma_covariates=(TREATMENT,),
        diagonal_D=True,
    )


def horizon_grid(t_lm: float, end: float = BOUNDARY[1],
                 count: int = N_HORIZONS) -> np.ndarray:
    """Equidistant horizons in (t_lm, end]: t_lm + k (end - t_lm) / count."""
    return t_lm + np.arange(1, count + 1) * (end - t_lm) / count


def _simulate_with_enough_censored(scenario: Scenario, n: int, seed: int,
                                   replicate: int):
    for attempt in range(50):
        sim_seed = _derive_seed(seed, "benchmark", scenario.id, replicate, attempt)
        dataset, truth = simulate_dataset(scenario, n, sim_seed)
        censored = [s.subject_id for s in dataset.subjects if s.status == 0]
        if len(censored) >= N_HOLDOUT:
            if attempt > 0:
                logger.info("scenario %s replicate %d: redrew %d time(s) to get "
                            "%d censored subjects", scenario.id, replicate, attempt,
                            N_HOLDOUT)
            return dataset, truth, censored
    raise DataError(
        f"scenario {scenario.id}: could not draw {N_HOLDOUT} censored subjects"
    )


def run_replicate(scenario_id: str, replicate: int, n: int, K: int, seed: int,
                  models=ALL_MODELS) -> list[dict]:
    """One benchmark replicate: simulate, hold out, fit, predict, score."""
    scenario = get_scenario(scenario_id)
    dataset, truth, censored = _simulate_with_enough_censored(
        scenario, n, seed, replicate)
    pick_rng = substream(seed, "holdout", scenario_id, replicate)
    held_ids = sorted(pick_rng.choice(censored, size=N_HOLDOUT, replace=False))
    held = [dataset.subject(sid) for sid in held_ids]
    training = Dataset(
        tuple(s for s in dataset.subjects if s.subject_id not in set(held_ids)),
        dataset.covariate_names,
    )

    jm_fits = {}
    for name in models:
        if name in JM_MODELS:
            jm_fits[name] = fit_joint(training, jm_config(JM_MODELS[name]))

    rows = []
    for subject in held:
        sid = subject.subject_id
        t_lm = subject.observations[-1].time
        us = horizon_grid(t_lm)
        gold = gold_standard(scenario, truth.b[sid],
                             subject.covariates[TREATMENT], t_lm, us).probabilities

        for name in models:
            if name in LM_MODELS:
                pi = _landmark_prediction(training, subject, t_lm,
                                          LM_MODELS[name], us)
            else:
                pred_seed = _derive_seed(seed, "predict", scenario_id, replicate,
                                         sid, name)
                pred = predict_jm(jm_fits[name], NewSubject.from_record(subject, t_lm),
                                  us, K=K, seed=pred_seed)
                pi = pred.point
            rmse = float(np.sqrt(np.mean((pi - gold) ** 2)))
            rows.append({
                "scenario": scenario_id,
                "model": name,
                "replicate": replicate,
                "subject": sid,
                "rmse": rmse,
            })
    for name, fit in jm_fits.items():
        logger.info("scenario %s replicate %d %s: loglik %.2f converged=%s "
                    "(%.1fs)", scenario_id, replicate, name, fit.loglik,
                    fit.converged, fit.fit_seconds)
    return rows


def _landmark_prediction(training: Dataset, subject: SubjectRecord, t_lm: float,
                         form_kind: str, us: np.ndarray) -> np.ndarray:
    """Weibull-baseline landmark prediction; an uninformative risk set
    (no events after the landmark) falls back to pi == 1."""
    form = LandmarkForm(form_kind)
    try:
        data = landmark_features(training, t_lm, form, (TREATMENT,))
        fit = fit_weibull_ph(data)
    except (DataError, DynsurvError) as exc:
        logger.warning("landmark %s at t=%.3f fell back to pi=1: %s",
                       form_kind, t_lm, exc)
        return np.ones_like(us)
    return np.asarray(predict_lm_weibull(fit, subject_row(fit, subject), us))


def _replicate_job(args):
    return run_replicate(*args)


def run_benchmark(scenario_ids, replicates: int, K: int = 200, seed: int = 0,
                  n: int = 300, models=ALL_MODELS, workers: int = 1) -> list[dict]:
    """Benchmark rows over scenarios x replicates; deterministic per seed,
    independent of the worker count."""
    if replicates < 1:
        raise SpecificationError("replicates must be >= 1")
    models = tuple(models)
    for m in models:
        if m not in ALL_MODELS:
            raise SpecificationError(f"unknown model {m!r}; choose from {ALL_MODELS}")
    jobs = [(sid, r, n, K, seed, models)
            for sid in scenario_ids for r in range(replicates)]
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            results = pool.map(_replicate_job, jobs)
    else:
        results = [_replicate_job(j) for j in jobs]
    rows = [row for chunk in results for row in chunk]
    rows.sort(key=lambda r: (r["scenario"], r["model"], r["replicate"], r["subject"]))
    return rows


def summarize_benchmark(rows: list[dict]) -> list[dict]:
    """Median and quartiles of RMSE per (scenario, model)."""
    out = []
    keys = sorted({(r["scenario"], r["model"]) for r in rows})
    for scenario_id, model in keys:
        vals = np.array([r["rmse"] for r in rows
                         if r["scenario"] == scenario_id and r["model"] == model])
        out.append({
            "scenario": scenario_id,
            "model": model,
            "n": int(len(vals)),
            "median_rmse": float(np.median(vals)),
            "q1_rmse": float(np.percentile(vals, 25)),
            "q3_rmse": float(np.percentile(vals, 75)),
        })
    return out
