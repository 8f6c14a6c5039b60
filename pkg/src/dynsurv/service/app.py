"""FastAPI service wrapping the core package.

Every endpoint is a pure function of its request (seeds are explicit), so
responses are reproducible and the CLI can run against an in-process ASGI
transport or a remote server interchangeably.
"""

from dataclasses import replace

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..data import Dataset, LongitudinalObservation, assemble_dataset
from ..dynpred import NewSubject, predict_jm
from ..errors import DataError, DynsurvError, SpecificationError, UndefinedMetricError
from ..jointmodel import JointFit, JointModelConfig, JointTheta, fit_joint
from ..landmark import (
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
from ..metrics import JointModelPredictor, LandmarkPredictor, evaluate_models
from ..simbench import (
    calibrate_censoring,
    get_scenario,
    run_benchmark,
    simulate_dataset,
    summarize_benchmark,
)
from . import schemas


def _payload_to_dataset(payload: schemas.DatasetPayload) -> Dataset:
    longitudinal = [
        LongitudinalObservation(r.subject_id, r.time, r.value)
        for r in payload.longitudinal
    ]
    survival = [
        {
            "subject_id": r.subject_id,
            "event_time": r.event_time,
            "status": r.status,
            "covariates": dict(r.covariates),
        }
        for r in payload.survival
    ]
    return assemble_dataset(longitudinal, survival, tuple(payload.covariate_names))


def dataset_to_payload(dataset: Dataset) -> schemas.DatasetPayload:
    longitudinal = [
        schemas.LongitudinalRow(subject_id=s.subject_id, time=o.time, value=o.value)
        for s in dataset.subjects for o in s.observations
    ]
    survival = [
        schemas.SurvivalRow(
            subject_id=s.subject_id,
            event_time=s.event_time,
            status=s.status,
            covariates=dict(s.covariates),
        )
        for s in dataset.subjects
    ]
    return schemas.DatasetPayload(
        longitudinal=longitudinal,
        survival=survival,
        covariate_names=list(dataset.covariate_names),
    )


def _error(exc: DynsurvError) -> HTTPException:
    if isinstance(exc, (DataError, UndefinedMetricError)):
        code = "data_error"
        status = 422
    elif isinstance(exc, SpecificationError):
        code = "usage_error"
        status = 400
    else:
        code = "numerical_error"
        status = 500
    return HTTPException(status_code=status,
                         detail={"code": code, "message": str(exc)})


def fit_from_dict(payload: dict):
    kind = payload.get("kind")
    if kind == "joint":
        return JointFit.from_dict(payload)
    if kind == "landmark_cox":
        return CoxFit.from_dict(payload)
    if kind == "landmark_weibull":
        return WeibullPHFit.from_dict(payload)
    raise DataError(f"unknown fit kind {kind!r}")


def predictor_for_fit(fit, dataset: Dataset, n_draws: int, seed: int):
    if isinstance(fit, JointFit):
        return JointModelPredictor(fit, K=n_draws, seed=seed)
    baseline = "breslow" if isinstance(fit, CoxFit) else "weibull"
    n_cov = len(fit.columns) - fit.form.n_features
    return LandmarkPredictor(dataset, fit.form, baseline,
                             tuple(fit.columns[:n_cov]))


def create_app() -> FastAPI:
    app = FastAPI(title="dynsurv", version=__version__)

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(req: schemas.SimulateRequest):
        try:
            scenario = get_scenario(req.scenario)
            dataset, truth = simulate_dataset(scenario, req.n, req.seed)
        except DynsurvError as exc:
            raise _error(exc) from exc
        return schemas.SimulateResponse(
            dataset=dataset_to_payload(dataset),
            truth=truth.to_dict(),
            config={"scenario": req.scenario, "n": req.n, "seed": req.seed},
        )

    @app.post("/fit", response_model=schemas.FitResponse)
    def fit(req: schemas.FitRequest):
        try:
            dataset = _payload_to_dataset(req.dataset)
            if req.method == "landmark":
                result = _fit_landmark(req, dataset)
            else:
                result = _fit_joint(req, dataset)
        except DynsurvError as exc:
            raise _error(exc) from exc
        config = req.model_dump(exclude={"dataset"})
        return schemas.FitResponse(
            fit=result.to_dict(),
            loglik=result.loglik,
            converged=result.converged,
            config=config,
        )

    def _fit_landmark(req: schemas.FitRequest, dataset: Dataset):
        if req.form in ("weighted_area", "shared_re"):
            raise SpecificationError(
                f"form {req.form!r} has no landmark analog; only the joint "
                "model supports it"
            )
        if req.baseline == "bspline":
            raise SpecificationError(
                "landmark fits use 'breslow' or 'weibull' baselines"
            )
        if req.landmark_time is None:
            raise SpecificationError("landmark fits require landmark_time")
        covs = (tuple(req.options.gamma_covariates)
                if req.options.gamma_covariates is not None else None)
        data = landmark_features(dataset, req.landmark_time,
                                 LandmarkForm(req.form), covs)
        return fit_cox(data) if req.baseline == "breslow" else fit_weibull_ph(data)

    def _fit_joint(req: schemas.FitRequest, dataset: Dataset):
        if req.baseline == "breslow":
            raise SpecificationError(
                "the joint model uses 'weibull' or 'bspline' baselines"
            )
        opts = req.options
        config = JointModelConfig(
            form=req.form,
            baseline=req.baseline,
            boundary_knots=tuple(opts.boundary_knots),
            internal_knots=tuple(opts.internal_knots),
            group_covariate=opts.group_covariate,
            gamma_covariates=(tuple(opts.gamma_covariates)
                              if opts.gamma_covariates is not None else None),
            diagonal_D=opts.diagonal_d,
            gh_nodes=opts.gh_nodes,
            baseline_internal_knots=opts.baseline_internal_knots,
        )
        init = None
        if req.warm_start is not None:
            init = JointTheta.from_dict(req.warm_start["theta"])
        return fit_joint(dataset, config, init=init)

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest):
        try:
            fit_obj = fit_from_dict(req.fit)
            subject = NewSubject(
                covariates=dict(req.subject.covariates),
                times=tuple(req.subject.times),
                values=tuple(req.subject.values),
                landmark=req.landmark,
            )
            horizons = sorted(req.horizons)
            if any(u < req.landmark for u in horizons):
                raise DataError("all horizons must be >= the landmark time")
            if isinstance(fit_obj, JointFit):
                pred = predict_jm(fit_obj, subject, horizons,
                                  K=req.n_draws, seed=req.seed)
                rows = pred.rows()
            else:
                rows = _predict_landmark(fit_obj, subject, horizons)
        except DynsurvError as exc:
            raise _error(exc) from exc
        return schemas.PredictResponse(
            rows=[schemas.PredictionRow(**r) for r in rows],
            config=req.model_dump(exclude={"fit", "subject"}),
        )

    def _predict_landmark(fit_obj, subject: NewSubject, horizons):
        if subject.landmark < fit_obj.landmark_time:
            raise DataError(
                f"subject landmark {subject.landmark} is before the fit's "
                f"landmark {fit_obj.landmark_time}"
            )
        record_like = _subject_as_record(subject)
        row = subject_row(fit_obj, record_like)
        pred = predict_lm if isinstance(fit_obj, CoxFit) else predict_lm_weibull
        pis = pred(fit_obj, row, horizons)
        return [
            {"u": float(u), "pi_hat": float(p), "lo": float("nan"),
             "hi": float("nan")}
            for u, p in zip(horizons, pis)
        ]

    def _subject_as_record(subject: NewSubject):
        from ..data import SubjectRecord

        return SubjectRecord(
            subject_id="new",
            covariates=dict(subject.covariates),
            event_time=subject.landmark + 1.0,
            status=0,
            observations=tuple(
                LongitudinalObservation("new", t, v)
                for t, v in zip(subject.times, subject.values)
            ),
        )

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(req: schemas.EvaluateRequest):
        try:
            dataset = _payload_to_dataset(req.dataset)
            names = req.model_names or [f"M{i+1}" for i in range(len(req.fits))]
            if len(names) != len(req.fits):
                raise DataError("model_names must match fits in length")
            predictors = {}
            for name, payload in zip(names, req.fits):
                fit_obj = fit_from_dict(payload)
                predictors[name] = predictor_for_fit(fit_obj, dataset,
                                                     req.n_draws, req.seed)
            rows = evaluate_models(dataset, predictors, req.t, req.u, req.dt,
                                   req.t_max, req.loss)
        except DynsurvError as exc:
            raise _error(exc) from exc
        return schemas.EvaluateResponse(
            rows=[schemas.MetricRow(**r) for r in rows],
            config=req.model_dump(exclude={"dataset", "fits"}),
        )

    @app.post("/benchmark", response_model=schemas.BenchmarkResponse)
    def benchmark(req: schemas.BenchmarkRequest):
        try:
            from ..simbench import ALL_MODELS

            models = tuple(req.models) if req.models else ALL_MODELS
            rows = run_benchmark(req.scenarios, req.replicates, K=req.n_draws,
                                 seed=req.seed, n=req.n_subjects, models=models,
                                 workers=req.workers)
            summary = summarize_benchmark(rows)
        except DynsurvError as exc:
            raise _error(exc) from exc
        return schemas.BenchmarkResponse(
            rows=[schemas.BenchmarkRow(**r) for r in rows],
            summary=[schemas.BenchmarkSummaryRow(**r) for r in summary],
            config=req.model_dump(),
        )

    @app.post("/calibrate", response_model=schemas.CalibrateResponse)
    def calibrate(req: schemas.CalibrateRequest):
        try:
            scenario = get_scenario(req.scenario)
            t_c = calibrate_censoring(scenario, req.target, req.n_pilot, req.seed)
        except DynsurvError as exc:
            raise _error(exc) from exc
        return schemas.CalibrateResponse(
            scenario=req.scenario, t_c=t_c, config=req.model_dump())

    return app


app = create_app()
