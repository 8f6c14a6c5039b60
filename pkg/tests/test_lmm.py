import numpy as np
import pytest

from conftest import make_subject
from dynsurv.data import Dataset
from dynsurv.errors import NumericalError
from dynsurv.lmm import LmmSpec, TrajectoryDesign, eb_mode, fit_lmm, trajectory
from dynsurv.numerics import NcsBasis, gauss_hermite
from dynsurv.numerics.quadrature import panel_points
from dynsurv.simbench import BETA_GROUP0, BETA_GROUP1, D_DIAG, SIGMA

BASIS = NcsBasis((0.0, 19.0), (2.1, 5.5))


def simulate_lmm(n, seed, spec):
    """Draw directly from the mixed model (no survival truncation)."""
    rng = np.random.default_rng(seed)
    design = TrajectoryDesign(spec.basis, spec.group_covariate,
                              (0.0, 1.0) if spec.group_covariate else (),
                              spec.include_random_intercept_and_spline)
    beta = np.array(BETA_GROUP0 + BETA_GROUP1)[:design.p]
    D = np.diag(D_DIAG[:design.q])
    subjects = []
    for i in range(n):
        trt = i % 2
        times = np.sort(np.concatenate([[0.0], rng.uniform(0, 19, 9)]))
        g = trt if spec.group_covariate else 0
        x = design.x_rows(times, g)
        z = design.z_rows(times)
        b = rng.multivariate_normal(np.zeros(design.q), D)
        y = x @ beta + z @ b + rng.standard_normal(len(times)) * SIGMA
        covs = {"treatment": float(trt)} if spec.group_covariate else {}
        subjects.append(make_subject(f"s{i}", times, y, 25.0, 0, **covs))
    names = ("treatment",) if spec.group_covariate else ()
    return Dataset(tuple(subjects), names), beta, D


def test_fit_recovers_appendix_parameters():
    spec = LmmSpec(BASIS, "treatment", True, diagonal_D=True)
    dataset, beta_true, D_true = simulate_lmm(300, 42, spec)
    fit = fit_lmm(dataset, spec)
    assert fit.converged
    # marginal GLS standard errors are ~0.15-0.35 here; 3 SEs ~ 1
    np.testing.assert_allclose(fit.beta, beta_true, atol=0.75)
    assert fit.sigma == pytest.approx(SIGMA, abs=0.15)
    np.testing.assert_allclose(np.diag(fit.D), np.diag(D_true), rtol=0.55)


def test_degenerate_intercept_only_fit_reduces_to_gaussian_mean():
    # iid data with no random-effect signal: beta -> grand mean and
    # sigma -> pooled ML standard deviation as D collapses
    rng = np.random.default_rng(1)
    subjects = []
    for i in range(120):
        times = np.sort(np.concatenate([[0.0], rng.uniform(0, 19, 4)]))
        y = 3.0 + rng.standard_normal(len(times)) * 0.8
        subjects.append(make_subject(f"s{i}", times, y, 25.0, 0))
    dataset = Dataset(tuple(subjects), ())
    spec = LmmSpec(BASIS, None, include_random_intercept_and_spline=False,
                   diagonal_D=True)
    fit = fit_lmm(dataset, spec)
    pooled = np.concatenate([[o.value for o in s.observations]
                             for s in dataset.subjects])
    grand_mean = pooled.mean()
    # ML variance decomposition: D_11 + sigma^2 matches the pooled variance
    total_sd = np.sqrt(fit.D[0, 0] + fit.sigma**2)
    assert fit.beta[0] == pytest.approx(grand_mean, abs=5e-3)
    assert total_sd == pytest.approx(pooled.std(ddof=0), abs=2e-2)


def test_loglik_at_optimum_beats_truth():
    spec = LmmSpec(BASIS, "treatment", True, diagonal_D=True)
    for seed in (0, 1):
        dataset, beta_true, D_true = simulate_lmm(60, seed, spec)
        fit = fit_lmm(dataset, spec)
        from dynsurv.lmm import _marginal_loglik, subject_matrices

        matrices = subject_matrices(dataset, fit.design)
        ll_true, _ = _marginal_loglik(matrices, D_true, SIGMA**2)
        assert fit.loglik >= ll_true - 1e-6


def test_fit_invariant_to_subject_order():
    spec = LmmSpec(BASIS, "treatment", True, diagonal_D=True)
    dataset, *_ = simulate_lmm(50, 3, spec)
    shuffled = Dataset(tuple(reversed(dataset.subjects)), dataset.covariate_names)
    fit1 = fit_lmm(dataset, spec)
    fit2 = fit_lmm(shuffled, spec)
    assert fit1.loglik == pytest.approx(fit2.loglik, abs=1e-6)
    np.testing.assert_allclose(fit1.beta, fit2.beta, atol=1e-5)


def test_rank_deficient_design_rejected():
    # every subject observed only at t=0, where all spline columns vanish
    rng = np.random.default_rng(9)
    subjects = [
        make_subject(f"s{i}", [0.0], [rng.standard_normal()], 25.0, 0)
        for i in range(20)
    ]
    dataset = Dataset(tuple(subjects), ())
    with pytest.raises(NumericalError, match="rank"):
        fit_lmm(dataset, LmmSpec(BASIS, None, True, diagonal_D=True))


def test_marginal_loglik_matches_gauss_hermite_on_small_toy():
    # 2 random effects, tiny data: analytic integral vs product GH rule
    basis = NcsBasis((0.0, 10.0), ())
    spec = LmmSpec(basis, None, True, diagonal_D=False)
    rng = np.random.default_rng(17)
    subjects = []
    for i in range(12):
        times = np.sort(np.concatenate([[0.0], rng.uniform(0, 10, 3)]))
        y = 1.0 + 0.5 * times / 10 + rng.standard_normal(len(times))
        subjects.append(make_subject(f"s{i}", times, y, 12.0, 0))
    dataset = Dataset(tuple(subjects), ())
    fit = fit_lmm(dataset, spec)

    from dynsurv.lmm import _marginal_loglik, subject_matrices

    matrices = subject_matrices(dataset, fit.design)
    ll_analytic, beta = _marginal_loglik(matrices, fit.D, fit.sigma**2)

    rule = gauss_hermite(25)
    L = np.linalg.cholesky(fit.D)
    nodes_1d = rule.nodes
    w_1d = rule.weights
    ll_gh = 0.0
    for y, X, Z in matrices:
        total = 0.0
        for i1, x1 in enumerate(nodes_1d):
            for i2, x2 in enumerate(nodes_1d):
                b = np.sqrt(2.0) * (L @ np.array([x1, x2]))
                r = y - X @ beta - Z @ b
                dens = np.exp(-0.5 * r @ r / fit.sigma**2) \
                    / (2 * np.pi * fit.sigma**2) ** (len(y) / 2)
                total += w_1d[i1] * w_1d[i2] * dens
        ll_gh += np.log(total / np.pi)
    assert ll_gh == pytest.approx(ll_analytic, abs=1e-6)


def test_eb_mode_matches_iterative_optimum(scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    spec = LmmSpec(BASIS, "treatment", True, diagonal_D=True)
    fit = fit_lmm(dataset, spec)
    subject = dataset.subjects[0]
    b_hat, curvature = eb_mode(subject, fit)

    from scipy.optimize import minimize

    design = fit.design
    times = np.array(subject.observation_times)
    g = design.group_index(subject)
    X, Z = design.x_rows(times, g), design.z_rows(times)
    y = np.array(subject.observation_values)
    D_inv = np.linalg.inv(fit.D)

    def neg_log_post(b):
        r = y - X @ fit.beta - Z @ b
        return 0.5 * r @ r / fit.sigma**2 + 0.5 * b @ D_inv @ b

    res = minimize(neg_log_post, np.zeros(design.q), method="BFGS", tol=1e-14)
    np.testing.assert_allclose(b_hat, res.x, atol=1e-6)

    # curvature equals Z'Z/sigma^2 + D^{-1}, cross-checked by finite differences
    expected = Z.T @ Z / fit.sigma**2 + D_inv
    np.testing.assert_allclose(curvature, expected, atol=1e-10)
    h = 1e-5
    fd = np.zeros((design.q, design.q))
    for i in range(design.q):
        for j in range(design.q):
            ei, ej = np.zeros(design.q), np.zeros(design.q)
            ei[i], ej[j] = h, h
            fd[i, j] = (neg_log_post(b_hat + ei + ej) - neg_log_post(b_hat + ei - ej)
                        - neg_log_post(b_hat - ei + ej)
                        + neg_log_post(b_hat - ei - ej)) / (4 * h * h)
    np.testing.assert_allclose(curvature, fd, atol=1e-4)


def test_eb_mode_shrinks_to_zero_when_data_match_fixed_curve():
    spec = LmmSpec(BASIS, None, True, diagonal_D=True)
    rng = np.random.default_rng(5)
    subjects = []
    beta = np.array([1.0, 0.5, -0.2, 0.3])
    design = TrajectoryDesign(BASIS, None, (), True)
    for i in range(30):
        times = np.sort(np.concatenate([[0.0], rng.uniform(0, 19, 30)]))
        y = design.x_rows(times, 0) @ beta + rng.standard_normal(len(times)) * 1e-4
        subjects.append(make_subject(f"s{i}", times, y, 25.0, 0))
    dataset = Dataset(tuple(subjects), ())
    fit = fit_lmm(dataset, spec)
    b_hat, _ = eb_mode(dataset.subjects[0], fit)
    assert np.max(np.abs(b_hat)) < 1e-2


def test_trajectory_identities():
    design = TrajectoryDesign(BASIS, None, (), True)
    zero = trajectory(design, np.zeros(4), 0, np.zeros(4), 5.0)
    assert zero == (0.0, 0.0, 0.0)

    rng = np.random.default_rng(23)
    beta = rng.standard_normal(4)
    b = rng.standard_normal(4)
    h = 1e-5
    for t in rng.uniform(0.1, 18.0, size=25):
        m, m_prime, m_area = trajectory(design, beta, 0, b, float(t))
        m_hi, _, _ = trajectory(design, beta, 0, b, float(t + h))
        m_lo, _, _ = trajectory(design, beta, 0, b, float(t - h))
        assert m_prime == pytest.approx((m_hi - m_lo) / (2 * h), abs=1e-6)
        cuts = [c for c in (2.1, 5.5) if c < t]
        nodes, weights = panel_points(0.0, float(t), cuts)
        m_nodes = np.array([trajectory(design, beta, 0, b, float(s))[0]
                            for s in nodes])
        assert m_area == pytest.approx(float(weights @ m_nodes), abs=1e-9)


def test_shrinkage_reduces_residual_variance(scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    spec = LmmSpec(BASIS, "treatment", True, diagonal_D=True)
    fit = fit_lmm(dataset, spec)
    raw_sse = fitted_sse = 0.0
    n_obs = 0
    for subject in dataset.subjects:
        design = fit.design
        times = np.array(subject.observation_times)
        g = design.group_index(subject)
        X, Z = design.x_rows(times, g), design.z_rows(times)
        y = np.array(subject.observation_values)
        b_hat, _ = eb_mode(subject, fit)
        raw = y - X @ fit.beta
        fitted = raw - Z @ b_hat
        raw_sse += float(raw @ raw)
        fitted_sse += float(fitted @ fitted)
        n_obs += len(y)
    assert fitted_sse < raw_sse
    assert fitted_sse / n_obs <= fit.sigma**2 * 1.05


def test_fit_serialization_round_trip(scenario_i_dataset):
    from dynsurv.lmm import LmmFit

    dataset, _ = scenario_i_dataset
    spec = LmmSpec(BASIS, "treatment", True, diagonal_D=True)
    fit = fit_lmm(dataset, spec)
    back = LmmFit.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.beta, fit.beta)
    np.testing.assert_array_equal(back.D, fit.D)
    assert back.sigma == fit.sigma
    assert back.design.group_levels == fit.design.group_levels
