import numpy as np
import pytest

from conftest import make_subject
from dynsurv.data import Dataset
from dynsurv.errors import DataError, NumericalError, SpecificationError
from dynsurv.landmark import (
    LandmarkForm,
    breslow_cumhaz,
    fit_cox,
    fit_weibull_ph,
    landmark_features,
    marker_features,
    predict_lm,
    predict_lm_weibull,
    subject_row,
)


def landmark_ds(rows, t, form="value", covariates=("x",)):
    """rows: (times, values, event_time, status, x)."""
    subjects = tuple(
        make_subject(f"s{i}", times, values, T, d, x=x)
        for i, (times, values, T, d, x) in enumerate(rows)
    )
    ds = Dataset(subjects, ("x",))
    return landmark_features(ds, t, LandmarkForm(form), covariates)


def test_form_validation():
    with pytest.raises(SpecificationError):
        LandmarkForm("shared_re")
    with pytest.raises(SpecificationError):
        LandmarkForm("weighted_area")


def test_last_value_carried_forward():
    s = make_subject("s", [0.0, 3.0], [2.0, 4.0], 9.0, 1)
    np.testing.assert_array_equal(marker_features(s, 5.0, LandmarkForm("value")),
                                  [4.0])


def test_area_step_function():
    s = make_subject("s", [0.0, 3.0], [2.0, 4.0], 9.0, 1)
    # 2 on [0,3), 4 on [3,5] -> 2*3 + 4*2 = 14
    np.testing.assert_allclose(marker_features(s, 5.0, LandmarkForm("area")),
                               [14.0])


def test_slope_single_observation_is_zero():
    s = make_subject("s", [1.0], [2.0], 9.0, 1)
    np.testing.assert_array_equal(
        marker_features(s, 5.0, LandmarkForm("value_slope")), [2.0, 0.0])
    s2 = make_subject("s", [0.0, 4.0], [1.0, 3.0], 9.0, 1)
    np.testing.assert_allclose(
        marker_features(s2, 5.0, LandmarkForm("value_slope")), [3.0, 0.5])


def test_missing_history_rejected():
    s = make_subject("s", [6.0], [2.0], 9.0, 1)
    with pytest.raises(DataError, match="no observation"):
        marker_features(s, 5.0, LandmarkForm("value"))


def test_landmark_features_risk_set_and_reset_time():
    rows = [
        ([0.0], [1.0], 2.0, 1, 0.0),   # leaves before t=3
        ([0.0], [2.0], 6.0, 1, 1.0),
        ([0.0], [3.0], 9.0, 0, 0.0),
    ]
    data = landmark_ds(rows, 3.0)
    assert data.subject_ids == ["s1", "s2"]
    np.testing.assert_allclose(data.reset_times, [3.0, 6.0])
    np.testing.assert_allclose(data.X[:, 0], [1.0, 0.0])
    np.testing.assert_allclose(data.X[:, 1], [2.0, 3.0])


def _partial_loglik_value(beta, s, d, X):
    ll = 0.0
    eta = X @ beta
    for i in range(len(s)):
        if d[i] == 1:
            ll += eta[i] - np.log(np.sum(np.exp(eta[s >= s[i]])))
    return ll


def test_fit_cox_matches_grid_search_oracle():
    rows = [
        ([0.0], [0.0], 1.0, 1, 1.0),
        ([0.0], [0.0], 2.0, 0, 0.0),
        ([0.0], [0.0], 3.0, 1, 1.0),
        ([0.0], [0.0], 4.0, 1, 0.0),
        ([0.0], [0.0], 6.0, 0, 1.0),
    ]
    # single covariate: marker constant, use x only
    data = landmark_ds(rows, 0.0, "value")
    # drop the constant marker column by fitting on x alone
    data.X = data.X[:, :1]
    data.columns = ["x"]
    fit = fit_cox(data)
    grid = np.linspace(-4, 4, 20001)
    lls = [_partial_loglik_value(np.array([b]), data.reset_times, data.status,
                                 data.X) for b in grid]
    best = grid[int(np.argmax(lls))]
    assert fit.coef[0] == pytest.approx(best, abs=1e-3)
    assert fit.loglik == pytest.approx(max(lls), abs=1e-6)
    assert fit.converged


def test_fit_cox_score_vanishes_and_hessian_negative(scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    data = landmark_features(dataset, 2.0, LandmarkForm("value"), ("treatment",))
    fit = fit_cox(data)
    from dynsurv.landmark import _partial_loglik_parts

    ll, grad, hess = _partial_loglik_parts(fit.coef, data.reset_times,
                                           data.status, data.X)
    assert np.max(np.abs(grad)) <= 1e-8 * (1.0 + abs(ll))
    assert np.all(np.linalg.eigvalsh(hess) <= 1e-9)


def test_fit_cox_constant_covariate_rejected():
    rows = [
        ([0.0], [1.0], 1.0, 1, 0.5),
        ([0.0], [2.0], 2.0, 1, 0.5),
        ([0.0], [3.0], 3.0, 0, 0.5),
    ]
    data = landmark_ds(rows, 0.0)
    with pytest.raises(NumericalError, match="x"):
        fit_cox(data)


def test_fit_cox_no_events_rejected():
    rows = [
        ([0.0], [1.0], 1.0, 0, 0.0),
        ([0.0], [2.0], 2.0, 0, 1.0),
    ]
    data = landmark_ds(rows, 0.0)
    with pytest.raises(DataError, match="no events"):
        fit_cox(data)


def test_breslow_reduces_to_nelson_aalen_for_null_model():
    # 3 subjects, events at reset times 1 and 2, no covariate effect
    rows = [
        ([0.0], [1.0], 1.0, 1, 0.0),
        ([0.0], [1.0], 2.0, 1, 0.0),
        ([0.0], [1.0], 3.0, 0, 0.0),
    ]
    subjects = tuple(
        make_subject(f"s{i}", times, values, T, d, x=x)
        for i, (times, values, T, d, x) in enumerate(rows)
    )
    ds = Dataset(subjects, ("x",))
    data = landmark_features(ds, 0.0, LandmarkForm("value"), ())
    # null model: zero coefficients, marker feature constant is rejected, so
    # force a zero-coefficient fit via the Breslow helper directly
    from dynsurv.landmark import _breslow_increments

    times, inc = _breslow_increments(data.reset_times, data.status,
                                     np.zeros(len(data.reset_times)))
    np.testing.assert_allclose(times, [1.0, 2.0])
    np.testing.assert_allclose(inc, [1.0 / 3.0, 1.0 / 2.0])


def test_breslow_cumhaz_steps_and_prediction(scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    data = landmark_features(dataset, 2.0, LandmarkForm("value"), ("treatment",))
    fit = fit_cox(data)
    assert breslow_cumhaz(fit, 0.0) == 0.0
    before_first = 0.5 * fit.baseline_times[0]
    assert breslow_cumhaz(fit, before_first) == 0.0
    grid = np.linspace(0.0, 20.0, 101)
    ch = breslow_cumhaz(fit, grid)
    assert np.all(np.diff(ch) >= 0)

    subject = dataset.subject(data.subject_ids[0])
    row = subject_row(fit, subject)
    assert predict_lm(fit, row, fit.landmark_time) == 1.0
    u_grid = np.linspace(2.0, 21.0, 40)
    pi = predict_lm(fit, row, u_grid)
    assert np.all(np.diff(pi) <= 1e-12)
    assert np.all((pi > 0) & (pi <= 1))
    with pytest.raises(ValueError):
        predict_lm(fit, row, 1.0)


def test_cox_invariance_under_covariate_rescaling(scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    data = landmark_features(dataset, 1.0, LandmarkForm("value"), ("treatment",))
    fit1 = fit_cox(data)
    scaled = landmark_features(dataset, 1.0, LandmarkForm("value"), ("treatment",))
    scaled.X = scaled.X.copy()
    scaled.X[:, 1] *= 10.0  # rescale the marker feature
    fit2 = fit_cox(scaled)
    assert fit2.alpha[0] == pytest.approx(fit1.alpha[0] / 10.0, rel=1e-6)
    eta1 = data.X @ fit1.coef
    eta2 = scaled.X @ fit2.coef
    np.testing.assert_allclose(eta1, eta2, atol=1e-7)


def test_predict_preserves_subject_ordering(scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    data = landmark_features(dataset, 2.0, LandmarkForm("value"), ("treatment",))
    fit = fit_cox(data)
    s1 = dataset.subject(data.subject_ids[0])
    s2 = dataset.subject(data.subject_ids[1])
    r1, r2 = subject_row(fit, s1), subject_row(fit, s2)
    us = np.linspace(2.5, 18.0, 25)
    p1, p2 = predict_lm(fit, r1, us), predict_lm(fit, r2, us)
    diff = p1 - p2
    nonzero = diff[np.abs(diff) > 1e-13]
    assert np.all(nonzero > 0) or np.all(nonzero < 0) or len(nonzero) == 0


def test_weibull_ph_fit_recovers_simulated_parameters():
    rng = np.random.default_rng(4)
    n = 4000
    x = rng.integers(0, 2, n).astype(float)
    shape, g0, g1 = 1.5, -2.0, 0.7
    u = rng.uniform(size=n)
    t = (-np.log(u) * np.exp(-(g0 + g1 * x))) ** (1 / shape)
    c = rng.uniform(0, 8, n)
    obs = np.minimum(t, c)
    d = (t <= c).astype(int)
    subjects = tuple(
        make_subject(f"s{i}", [0.0], [0.0], obs[i] + 1.0, d[i], x=x[i])
        for i in range(n)
    )
    ds = Dataset(subjects, ("x",))
    from dynsurv.landmark import LandmarkData

    data = LandmarkData(0.0, LandmarkForm("value"), [s.subject_id for s in subjects],
                        obs, d.astype(float), x[:, None], ["x"])
    fit = fit_weibull_ph(data)
    assert fit.converged
    assert fit.sigma_t == pytest.approx(shape, abs=0.08)
    assert fit.gamma0 == pytest.approx(g0, abs=0.12)
    assert fit.coef[0] == pytest.approx(g1, abs=0.1)

    row = np.array([1.0])
    assert predict_lm_weibull(fit, row, 0.0) == 1.0
    pi = predict_lm_weibull(fit, row, np.linspace(0, 6, 20))
    assert np.all(np.diff(pi) <= 0)


def test_cox_serialization_round_trip(scenario_i_dataset):
    from dynsurv.landmark import CoxFit

    dataset, _ = scenario_i_dataset
    data = landmark_features(dataset, 2.0, LandmarkForm("value_slope"),
                             ("treatment",))
    fit = fit_cox(data)
    back = CoxFit.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.coef, fit.coef)
    np.testing.assert_array_equal(back.baseline_increments,
                                  fit.baseline_increments)
    subject = dataset.subject(data.subject_ids[3])
    row = subject_row(back, subject)
    assert predict_lm(back, row, 8.0) == predict_lm(fit, row, 8.0)
