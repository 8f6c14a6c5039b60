import numpy as np
import pytest

from conftest import make_subject
from dynsurv.data import Dataset
from dynsurv.jointmodel import (
    BaselineSpec,
    JointFit,
    JointLikelihood,
    JointModelConfig,
    JointModelStructure,
    JointTheta,
    ThetaPacker,
    cum_hazard,
    fit_joint,
    hazard,
    linear_predictor,
    survival,
)
from dynsurv.lmm import TrajectoryDesign
from dynsurv.numerics import NcsBasis, norm_cdf
from dynsurv.simbench import SCENARIOS, simulate_dataset

BASIS = NcsBasis((0.0, 19.0), (2.1, 5.5))


def structure_for(form, baseline="weibull", baseline_knots=()):
    design = TrajectoryDesign(BASIS, "treatment", (0.0, 1.0), True)
    spec = (BaselineSpec("weibull") if baseline == "weibull"
            else BaselineSpec("bspline", (0.0, 20.0), baseline_knots))
    return JointModelStructure(design, form, spec, ("treatment",))


def theta_for(structure, alpha, sigma_t=1.65, gamma=(-1.0, 0.4), beta=None):
    rng = np.random.default_rng(0)
    beta = np.asarray(beta if beta is not None else rng.standard_normal(8))
    if structure.baseline.kind == "weibull":
        return JointTheta(beta, np.diag([0.5, 1.0, 0.7, 0.3]), 1.0,
                          np.asarray(gamma, dtype=float),
                          np.asarray(alpha, dtype=float), sigma_t=sigma_t)
    return JointTheta(beta, np.diag([0.5, 1.0, 0.7, 0.3]), 1.0,
                      np.asarray(gamma, dtype=float),
                      np.asarray(alpha, dtype=float),
                      gamma_h0=np.zeros(structure.baseline.n_params))


W_ROW = np.array([1.0, 1.0])


@pytest.mark.parametrize("form,n_alpha", [
    ("value", 1), ("value_slope", 2), ("area", 1), ("weighted_area", 1),
    ("shared_re", 4),
])
def test_alpha_dimension_and_zero_association(form, n_alpha):
    structure = structure_for(form)
    theta = theta_for(structure, np.zeros(n_alpha))
    b = np.array([0.3, -0.2, 0.5, 0.1])
    for t in (0.0, 1.0, 7.3, 18.0):
        eta = linear_predictor(structure, theta, b, W_ROW, 1, t)
        assert eta == pytest.approx(float(theta.gamma @ W_ROW), abs=1e-12)


def test_weighted_area_of_constant_marker_integrates_to_one():
    structure = structure_for("weighted_area")
    # marker identically 1: beta = (1,0,0,0) block for the subject's group,
    # random effects zero
    beta = np.zeros(8)
    beta[4] = 1.0  # group 1 intercept
    theta = theta_for(structure, [2.0], gamma=(0.0, 0.0), beta=beta)
    b = np.zeros(4)
    for t in (6.0, 10.0, 17.0):
        eta = linear_predictor(structure, theta, b, W_ROW, 1, t)
        expected = 2.0 * (norm_cdf(t) - 0.5) / (norm_cdf(t) - 0.5)
        assert eta == pytest.approx(expected, abs=1e-9)
    assert linear_predictor(structure, theta, b, W_ROW, 1, 0.0) == 0.0


def test_shared_re_is_time_constant():
    structure = structure_for("shared_re")
    theta = theta_for(structure, [0.5, -0.3, 0.2, 0.9])
    b = np.array([0.3, -0.2, 0.5, 0.1])
    etas = [linear_predictor(structure, theta, b, W_ROW, 0, t)
            for t in (0.0, 3.0, 11.0, 18.5)]
    np.testing.assert_allclose(etas, etas[0], atol=1e-12)


def test_hazard_weibull_value_at_shape():
    structure = structure_for("value")
    theta = theta_for(structure, [0.0], sigma_t=1.65, gamma=(0.0, 0.0),
                      beta=np.zeros(8))
    h = hazard(structure, theta, np.zeros(4), W_ROW, 1, 1.0)
    assert h == pytest.approx(1.65, abs=1e-12)


def test_hazard_scales_with_linear_predictor_shift():
    structure = structure_for("value")
    theta = theta_for(structure, [0.4])
    b = np.array([0.1, 0.2, -0.3, 0.0])
    h1 = hazard(structure, theta, b, W_ROW, 1, 2.5)
    shifted = JointTheta(theta.beta, theta.D, theta.sigma,
                         theta.gamma + np.array([1.3, 0.0]), theta.alpha,
                         sigma_t=theta.sigma_t)
    h2 = hazard(structure, shifted, b, W_ROW, 1, 2.5)
    assert h2 == pytest.approx(h1 * np.exp(1.3), rel=1e-12)


def test_bspline_baseline_all_zero_gives_unit_h0():
    structure = structure_for("value", "bspline", (3.0, 9.0))
    theta = theta_for(structure, [0.0], gamma=(0.0,), beta=np.zeros(8))
    # gamma has no intercept under the bspline baseline
    theta = JointTheta(theta.beta, theta.D, theta.sigma, np.array([0.0]),
                       theta.alpha, gamma_h0=np.zeros(structure.baseline.n_params))
    for t in (0.5, 4.0, 12.0):
        assert hazard(structure, theta, np.zeros(4), np.array([0.0]), 0, t) \
            == pytest.approx(1.0, abs=1e-12)


def test_cum_hazard_shared_re_closed_form():
    structure = structure_for("shared_re")
    theta = theta_for(structure, [0.5, -0.3, 0.2, 0.9], sigma_t=1.65)
    b = np.array([0.3, -0.2, 0.5, 0.1])
    eta = float(theta.gamma @ W_ROW + theta.alpha @ b)
    for t in (0.5, 3.0, 12.0, 19.0):
        H = cum_hazard(structure, theta, b, W_ROW, 1, t)
        closed = np.exp(eta) * t ** theta.sigma_t
        assert H == pytest.approx(closed, rel=1e-8)
    assert cum_hazard(structure, theta, b, W_ROW, 1, 0.0) == 0.0
    assert survival(structure, theta, b, W_ROW, 1, 0.0) == 1.0


def test_cum_hazard_constant_marker_closed_form():
    structure = structure_for("value")
    beta = np.zeros(8)
    beta[0] = 2.3  # group-0 intercept; marker constant at 2.3
    theta = theta_for(structure, [0.7], sigma_t=1.65, beta=beta)
    b = np.zeros(4)
    w = np.array([1.0, 0.0])
    eta = float(theta.gamma @ w + 0.7 * 2.3)
    for t in (1.0, 6.5, 15.0):
        H = cum_hazard(structure, theta, b, w, 0, t)
        assert H == pytest.approx(np.exp(eta) * t ** 1.65, rel=1e-8)


def test_cum_hazard_monotone_and_survival_in_unit_interval():
    structure = structure_for("value_slope")
    theta = theta_for(structure, [0.3, 0.2])
    rng = np.random.default_rng(8)
    b = rng.standard_normal(4) * 0.5
    grid = np.linspace(0.0, 19.0, 40)
    H = np.array([cum_hazard(structure, theta, b, W_ROW, 0, t) for t in grid])
    assert np.all(np.diff(H) >= -1e-9)
    S = np.exp(-H)
    assert np.all((S > 0) & (S <= 1.0))


def scenario_config(form="value", **kw):
    return JointModelConfig(form=form, baseline="weibull",
                            group_covariate="treatment",
                            gamma_covariates=("treatment",), diagonal_D=True, **kw)


@pytest.mark.parametrize("form,alpha_dim", [
    ("value", 1), ("value_slope", 2), ("area", 1), ("weighted_area", 1),
    ("shared_re", 4),
])
def test_loglik_factorizes_when_association_is_zero(form, alpha_dim,
                                                    scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    config = scenario_config(form)
    structure = JointModelStructure.from_config(dataset, config)
    lik = JointLikelihood(dataset, structure)
    sc = SCENARIOS["I"]
    theta = JointTheta(sc.beta, sc.D, 2.0, np.array([-3.0, 0.4]),
                       np.zeros(alpha_dim), sigma_t=1.4)
    joint_ll = lik.loglik(theta)

    # independent oracles: analytic LMM marginal + closed-form Weibull piece
    from dynsurv.lmm import LmmSpec, _marginal_loglik, subject_matrices

    spec = LmmSpec(BASIS, "treatment", True, diagonal_D=True)
    design = TrajectoryDesign.from_dataset(dataset, spec)
    ll_lmm, _ = _marginal_loglik(subject_matrices(dataset, design),
                                 theta.D, theta.sigma ** 2)
    # beta is fixed here, not profiled: recompute with the fixed beta
    ll_lmm = _fixed_beta_lmm_loglik(dataset, design, theta)

    ll_surv = 0.0
    for s in dataset.subjects:
        eta = -3.0 + 0.4 * s.covariates["treatment"]
        T = s.event_time
        if s.status == 1:
            ll_surv += np.log(1.4) + 0.4 * np.log(T) + eta
        ll_surv -= T ** 1.4 * np.exp(eta)
    assert joint_ll == pytest.approx(ll_lmm + ll_surv, abs=1e-6)


def _fixed_beta_lmm_loglik(dataset, design, theta):
    from scipy.stats import multivariate_normal

    ll = 0.0
    for s in dataset.subjects:
        times = np.array(s.observation_times)
        g = design.group_index(s)
        X, Z = design.x_rows(times, g), design.z_rows(times)
        y = np.array(s.observation_values)
        V = Z @ theta.D @ Z.T + theta.sigma ** 2 * np.eye(len(y))
        ll += multivariate_normal.logpdf(y, mean=X @ theta.beta, cov=V)
    return ll


def test_single_subject_closed_form():
    # one subject, one observation, one random effect (intercept-only basis
    # is not available; use knotless basis -> q = 2, then zero out the slope
    # variance so only the intercept effect is active)
    basis = NcsBasis((0.0, 10.0), ())
    design = TrajectoryDesign(basis, None, (), True)
    structure = JointModelStructure(design, "value", BaselineSpec("weibull"), ())
    subject = make_subject("s1", [0.0], [1.2], 3.0, 1)
    dataset = Dataset((subject,), ())
    d1 = 0.8
    theta = JointTheta(np.array([0.5, 0.0]),
                       np.diag([d1, 1e-12]), 0.9, np.array([-1.1]),
                       np.array([0.0]), sigma_t=1.3)
    lik = JointLikelihood(dataset, structure)
    ll = lik.loglik(theta)
    # with alpha=0: N(y; beta0, d1 + sigma^2) x Weibull(T)
    y_var = d1 + 0.9 ** 2
    ll_long = -0.5 * (np.log(2 * np.pi * y_var) + (1.2 - 0.5) ** 2 / y_var)
    ll_surv = np.log(1.3) + 0.3 * np.log(3.0) - 1.1 - 3.0 ** 1.3 * np.exp(-1.1)
    assert ll == pytest.approx(ll_long + ll_surv, abs=1e-6)


def test_gh_node_convergence_on_two_effect_toy(scenario_i_dataset):
    full, _ = scenario_i_dataset
    dataset = Dataset(full.subjects[:30], full.covariate_names)
    config = JointModelConfig(form="value", baseline="weibull",
                              internal_knots=(), group_covariate="treatment",
                              gamma_covariates=("treatment",), diagonal_D=True)
    structure = JointModelStructure.from_config(dataset, config)
    theta = JointTheta(np.array([1.0, 0.1, -0.5, 0.1]),
                       np.diag([0.5, 1.5]), 2.0, np.array([-4.0, 0.4]),
                       np.array([0.25]), sigma_t=1.5)
    values = [JointLikelihood(dataset, structure, gh).loglik(theta)
              for gh in (5, 9, 15)]
    assert abs(values[1] - values[0]) < 1e-4
    assert abs(values[2] - values[1]) < 1e-4


def test_loglik_invariances(small_joint_fit):
    dataset, fit = small_joint_fit
    structure = fit.structure
    lik = JointLikelihood(dataset, structure)
    ll = lik.loglik(fit.theta)

    shuffled = Dataset(tuple(reversed(dataset.subjects)), dataset.covariate_names)
    lik_shuffled = JointLikelihood(shuffled, structure)
    assert lik_shuffled.loglik(fit.theta) == pytest.approx(ll, abs=1e-8)

    doubled_subjects = tuple(dataset.subjects) + tuple(
        make_subject(s.subject_id + "_copy", s.observation_times,
                     s.observation_values, s.event_time, s.status,
                     **s.covariates)
        for s in dataset.subjects
    )
    doubled = Dataset(doubled_subjects, dataset.covariate_names)
    lik_doubled = JointLikelihood(doubled, structure)
    assert lik_doubled.loglik(fit.theta) == pytest.approx(2 * ll, abs=1e-7)


def test_gradient_small_at_optimum(small_joint_fit):
    dataset, fit = small_joint_fit
    lik = JointLikelihood(dataset, fit.structure)
    packer = fit.packer
    x_hat = packer.pack(fit.theta)

    def f(x):
        return lik.loglik(packer.unpack(x))

    f0 = f(x_hat)
    grad = np.empty_like(x_hat)
    for j in range(len(x_hat)):
        h = 1e-6 * (1.0 + abs(x_hat[j]))
        xp, xm = x_hat.copy(), x_hat.copy()
        xp[j] += h
        xm[j] -= h
        grad[j] = (f(xp) - f(xm)) / (2 * h)
    assert np.max(np.abs(grad)) <= 1e-5 * (1.0 + abs(f0))


def test_fit_beats_truth_and_multistart_consistency(small_joint_fit):
    dataset, fit = small_joint_fit
    lik = JointLikelihood(dataset, fit.structure)
    config = JointModelConfig(form="value", baseline="weibull", internal_knots=(),
                              group_covariate="treatment",
                              gamma_covariates=("treatment",), diagonal_D=True)
    # perturbed restart reaches the same optimum
    x = fit.packer.pack(fit.theta)
    perturbed = fit.packer.unpack(x * 1.1 + 0.02)
    refit = fit_joint(dataset, config, compute_information=False, init=perturbed)
    assert refit.loglik == pytest.approx(fit.loglik, abs=1e-4)


def test_fit_serialization_round_trip(small_joint_fit):
    dataset, fit = small_joint_fit
    back = JointFit.from_dict(fit.to_dict())
    assert back.labels == fit.labels
    np.testing.assert_array_equal(back.theta.beta, fit.theta.beta)
    np.testing.assert_array_equal(back.information, fit.information)
    lik = JointLikelihood(dataset, back.structure)
    assert lik.loglik(back.theta) == pytest.approx(fit.loglik, abs=1e-9)


def test_packer_round_trip():
    structure = structure_for("value_slope")
    packer = ThetaPacker(structure, diagonal_D=False)
    rng = np.random.default_rng(12)
    A = rng.standard_normal((4, 4))
    theta = JointTheta(rng.standard_normal(8), A @ A.T + np.eye(4), 1.7,
                       np.array([-2.0, 0.3]), np.array([0.4, -0.1]),
                       sigma_t=1.2)
    x = packer.pack(theta)
    assert len(x) == packer.size == len(packer.labels)
    back = packer.unpack(x)
    np.testing.assert_allclose(back.D, theta.D, atol=1e-10)
    np.testing.assert_allclose(back.sigma, theta.sigma, atol=1e-12)
    np.testing.assert_allclose(back.sigma_t, theta.sigma_t, atol=1e-12)
