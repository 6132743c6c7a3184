import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from homoglab import calculus as dc
from homoglab.correctors import build_hierarchy
from homoglab.fluctuations import (Calibration, EnsembleConfig, EnsembleError, InsufficientSamplesError,
                                   ObservableSpec, calibrate, estimate_Q_leading, jackknife_se,
                                   linear_functional_variance, malliavin_fd_check, moment_stats,
                                   normal_quantiles, normality_metrics, poincare_check, probe_features,
                                   run_ensemble, sample_field_coefficient, scaling_fit)
from homoglab.gaussian_field import (CoefficientMapSpec, ConfigError, TorusGrid, build_gaussian_field,
                                     sample_white_noise)
from homoglab.two_scale import (RateModel, homogenized_cascade, random_trig, random_vector_trig,
                                solve_heterogeneous)

SMALL = EnsembleConfig(d=2, eps=1 / 8, h=0.5)  # N = 16
IDENTITY = EnsembleConfig(d=2, eps=1 / 8, h=0.5, coefficient=CoefficientMapSpec("constant"))


def _tf(seed=0):
    rng = np.random.default_rng(seed)
    return random_vector_trig(2, rng, 2, 1), random_vector_trig(2, rng, 2, 1), random_trig(2, rng, 2, 1)


@pytest.fixture(scope="module")
def small_calibration():
    return calibrate(SMALL, range(1000, 1010), 1)


# ---------------------------------------------------------------- configuration and specs

def test_config_grid_from_eps_and_h():
    assert SMALL.grid == TorusGrid(2, 16, 8.0)
    with pytest.raises(ConfigError):
        EnsembleConfig(eps=1 / 3, h=0.5)


def test_observable_spec_prerequisites():
    f, g, w = _tf()
    with pytest.raises(ConfigError):
        ObservableSpec("field-average", g=g)
    with pytest.raises(ConfigError):
        ObservableSpec("standard-commutator", g=g, f=f, w=w)
    with pytest.raises(ConfigError):
        ObservableSpec("corrector-average", 1, w=w, index=())
    with pytest.raises(ConfigError):
        ObservableSpec("variance", g=g)
    s = ObservableSpec("pathwise-gap", 1, g=g, f=f)
    assert s.needs_calibration and s.hierarchy_order == 1 and s.cascade_order == 1
    assert not ObservableSpec("field-average", 0, g=g, f=f).needs_calibration


# ---------------------------------------------------------------- calibration

def test_identity_calibration_gives_identity_tensors():
    cal = calibrate(IDENTITY, range(100, 103), 2)
    np.testing.assert_allclose(cal.tensors[1].entries, np.eye(2), atol=1e-15)
    assert np.max(np.abs(cal.tensors[2].entries)) <= 1e-15
    assert cal.tensors[1].count == 3


def test_calibration_round_trip_checks_id(small_calibration):
    data = small_calibration.to_dict()
    back = Calibration.from_dict(data)
    assert back.id == small_calibration.id
    data["tensors"][0]["entries"][0][0] += 1e-9
    with pytest.raises(EnsembleError):
        Calibration.from_dict(data)


def test_calibration_rejects_repeated_seeds():
    with pytest.raises(EnsembleError):
        calibrate(SMALL, [1, 1], 1)


# ---------------------------------------------------------------- ensemble engine

def test_identity_medium_values_are_deterministic_integral():
    f, _, _ = _tf(1)
    g = f  # random g and f of disjoint modes would give an integral of zero
    res = run_ensemble(ObservableSpec("field-average", 0, g=g, f=f), IDENTITY, [0, 1])
    grid = IDENTITY.grid
    coef = sample_field_coefficient(IDENTITY, 0)
    ubar = homogenized_cascade(build_hierarchy(coef, 1).abar, f, 1, grid).components[0]
    exact = dc.inner(g.edge_values(grid), dc.grad(ubar, grid.macro_spacing), grid.macro_volume)
    assert abs(exact) > 1e-3
    np.testing.assert_allclose(res.values[:, 0], exact, rtol=1e-9)


def test_rerun_is_bit_identical(small_calibration):
    f, g, _ = _tf(2)
    specs = [ObservableSpec("field-average", 0, g=g, f=f),
             ObservableSpec("standard-commutator", 1, g=g, f=f)]
    a = run_ensemble(specs, SMALL, [3, 1, 2], small_calibration)
    b = run_ensemble(specs, SMALL, [2, 3, 1], small_calibration)
    assert a.values.tobytes() == b.values.tobytes() and a.seeds == [1, 2, 3]
    assert a.calibration_id == small_calibration.id and a.config_digest == SMALL.digest


def test_parallel_run_matches_serial(small_calibration):
    f, g, _ = _tf(3)
    spec = ObservableSpec("pathwise-gap", 1, g=g, f=f)
    a = run_ensemble(spec, SMALL, range(4), small_calibration, workers=1)
    b = run_ensemble(spec, SMALL, range(4), small_calibration, workers=2)
    assert a.values.tobytes() == b.values.tobytes()


def test_seed_overlap_with_calibration_is_rejected(small_calibration):
    f, g, _ = _tf()
    with pytest.raises(EnsembleError, match="shared"):
        run_ensemble(ObservableSpec("commutator", 1, g=g, f=f), SMALL, [1005], small_calibration)


def test_missing_calibration_is_rejected():
    f, g, _ = _tf()
    with pytest.raises(EnsembleError, match="calibrate"):
        run_ensemble(ObservableSpec("expansion-error", 1, f=f), SMALL, [0])


def test_calibration_for_other_config_is_rejected(small_calibration):
    f, g, _ = _tf()
    with pytest.raises(EnsembleError, match="different configuration"):
        run_ensemble(ObservableSpec("commutator", 1, g=g, f=f), SMALL.with_eps(1 / 16), [0],
                     small_calibration)


def test_commutator_observable_equals_field_average_minus_dual_source(small_calibration):
    # first-order reduction: <g, grad u> - <grad vbar, f> = <grad vbar, Xi[grad u]>
    f, g, _ = _tf(4)
    specs = [ObservableSpec("field-average", 0, g=g, f=f), ObservableSpec("commutator", 1, g=g, f=f)]
    res = run_ensemble(specs, SMALL, [7], small_calibration)
    grid = SMALL.grid
    v = homogenized_cascade(small_calibration.dual_tensors, g, 1, grid, dual=True).assembled()
    dual_source = dc.inner(dc.grad(v, grid.macro_spacing), f.edge_values(grid), grid.macro_volume)
    assert res.values[0, 1] == pytest.approx(res.values[0, 0] - dual_source, rel=1e-8)


def test_corrector_average_matches_direct_value():
    _, _, w = _tf(5)
    res = run_ensemble(ObservableSpec("corrector-average", 1, w=w, index=(0,)), SMALL, [4])
    cs = build_hierarchy(sample_field_coefficient(SMALL, 4), 1)
    assert res.values[0, 0] == pytest.approx(np.sum(w(SMALL.grid) * cs.phi[1][0]) / 256, rel=1e-12)


def test_failed_seeds_become_nan_rows(monkeypatch):
    from homoglab import fluctuations as fl

    f, g, _ = _tf()
    real = fl.evaluate_seed

    def flaky(config, specs, seed, *args, **kw):
        if seed == 1:
            raise dc.SolverError("synthetic failure")
        return real(config, specs, seed, *args, **kw)

    monkeypatch.setattr(fl, "evaluate_seed", flaky)
    spec = ObservableSpec("field-average", 0, g=g, f=f)
    res = run_ensemble(spec, SMALL, [0, 1, 2])
    assert list(res.failures) == [1] and np.isnan(res.values[1, 0])
    assert len(res.column(spec.label)) == 2
    with pytest.raises(EnsembleError, match="all 1 seeds failed"):
        run_ensemble(spec, SMALL, [1])


# ---------------------------------------------------------------- moments

def test_constant_samples_have_zero_moments():
    m = moment_stats(np.full(120, 2.5))
    assert m.variance == 0.0 and all(v == 0.0 for v in m.N.values())
    assert m.mean == 2.5


def test_gaussian_fourth_moment():
    x = np.random.default_rng(0).standard_normal(10_000)
    m = moment_stats(x)
    fourth = m.N[4] ** 4
    # delta method: se of E|X|^4 from the jackknife se of N_4
    se4 = 4 * m.N[4] ** 3 * m.N_se[4]
    assert abs(fourth - 3.0) <= 4 * se4
    assert m.N[2] == pytest.approx(np.sqrt(m.variance))


def test_moment_sample_size_guards():
    with pytest.raises(InsufficientSamplesError):
        moment_stats(np.arange(20.0))
    with pytest.raises(InsufficientSamplesError):
        moment_stats(np.arange(50.0))
    moment_stats(np.arange(50.0), orders=(1, 2))


@given(seed=st.integers(0, 2**31), a=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3),
       b=st.floats(-100, 100))
def test_moments_permutation_invariant_and_affine(seed, a, b):
    r = np.random.default_rng(seed)
    x = r.standard_normal(120)
    m = moment_stats(x)
    p = moment_stats(r.permutation(x))
    assert (m.variance, m.N, m.variance_se) == (p.variance, p.N, p.variance_se)
    s = moment_stats(a * x + b)
    assert s.variance == pytest.approx(a * a * m.variance, rel=1e-9)
    assert s.N[4] == pytest.approx(abs(a) * m.N[4], rel=1e-9)


def test_jackknife_of_mean_is_standard_error():
    x = np.random.default_rng(1).standard_normal(200)
    assert jackknife_se(x, lambda r: r.mean(axis=1)) == pytest.approx(x.std(ddof=1) / np.sqrt(200))


# ---------------------------------------------------------------- scaling fits

def test_exact_power_law_slope():
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    fit = scaling_fit(eps, values=3.0 * eps**2.0, predicted=2.0)
    assert abs(fit.slope - 2.0) <= 1e-12 and fit.monotone
    np.testing.assert_allclose(fit.ratios, [4.0, 4.0])


def test_scaling_fit_against_rate_model():
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    fit = scaling_fit(eps, values=eps**1.0, predicted=RateModel(3, 1))
    assert fit.predicted == 1.0


def test_scaling_fit_recovers_variance_slope_from_samples():
    r = np.random.default_rng(2)
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    groups = [e * r.standard_normal(2000) for e in eps]  # variance eps^2
    fit = scaling_fit(eps, groups, predicted=2.0)
    assert abs(fit.slope_z) <= 4 and 0 < fit.slope_se < 0.1


def test_scaling_fit_flags_nonmonotone_and_rejects_bad_input():
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    assert not scaling_fit(eps, values=[1.0, 2.0, 1.5]).monotone
    with pytest.raises(ValueError):
        scaling_fit(eps, values=[1.0, 0.0, 1.0])
    with pytest.raises(InsufficientSamplesError):
        scaling_fit(eps[:2], values=[1.0, 2.0])


@given(seed=st.integers(0, 2**31), c=st.floats(0.1, 10))
def test_scaling_slope_invariant_under_rescaling(seed, c):
    r = np.random.default_rng(seed)
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    groups = [e * r.standard_normal(40) for e in eps]
    a = scaling_fit(eps, groups)
    b = scaling_fit(eps, [c * g for g in groups])
    assert b.slope == pytest.approx(a.slope, abs=1e-10)
    assert b.slope_se == pytest.approx(a.slope_se, rel=1e-8)


# ---------------------------------------------------------------- normality

def test_ks_accepts_normal_sample():
    x = np.random.default_rng(3).standard_normal(10_000)
    nm = normality_metrics(x)
    assert nm.ks <= 1.36 / np.sqrt(10_000) and nm.total_variation == "not-applicable"


def test_ks_rejects_exponential_sample():
    assert normality_metrics(np.random.default_rng(4).exponential(size=10_000)).ks > 0.05


@given(seed=st.integers(0, 2**31), a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_normality_metrics_affine_invariant(seed, a, b):
    x = np.random.default_rng(seed).standard_normal(150)
    m1, m2 = normality_metrics(x), normality_metrics(a * x + b)
    assert m2.ks == pytest.approx(m1.ks, abs=1e-9)
    assert m2.skewness == pytest.approx(m1.skewness, abs=1e-8)


def test_normality_needs_variance_and_samples():
    with pytest.raises(ValueError):
        normality_metrics(np.ones(200))
    with pytest.raises(InsufficientSamplesError):
        normality_metrics(np.arange(50.0))


def test_qq_points_of_normal_sample_lie_near_diagonal():
    n = 2000
    z = np.sort(np.random.default_rng(5).standard_normal(n))
    t = normal_quantiles(n)
    inner = slice(n // 20, -n // 20)
    assert np.max(np.abs(z[inner] - t[inner])) <= 0.15


def test_null_bands_match_known_standard_errors():
    nm = normality_metrics(np.random.default_rng(6).standard_normal(200))
    bands = nm.null_bands(1.0)
    # large-n approximations sqrt(6/n), sqrt(24/n) are within 5% at n = 200
    assert bands["skewness"] == pytest.approx(np.sqrt(6 / 200), rel=0.05)
    assert bands["excess_kurtosis"] == pytest.approx(np.sqrt(24 / 200), rel=0.05)


# ---------------------------------------------------------------- covariance structure

def _probes(n, seed):
    rng = np.random.default_rng(seed)
    return [(random_vector_trig(2, rng, 2, 1), random_trig(2, rng, 2, 1)) for _ in range(n)]


def _synthetic_values(Q, probes, grid, seeds, seed):
    """Gaussian samples whose variance is the quadratic form of ``Q`` (unrescaled by eps^d)."""
    v = np.einsum("pijkl,ijkl->p", probe_features(probes, grid), Q) * grid.eps ** grid.d
    return np.random.default_rng(seed).standard_normal((seeds, len(probes))) * np.sqrt(v)


def _symmetric_Q(seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((4, 4))
    M = A @ A.T + 4 * np.eye(4)  # positive form on (i, j) pairs
    Q = M.reshape(2, 2, 2, 2)
    Q = 0.25 * (Q + Q.transpose(2, 1, 0, 3) + Q.transpose(0, 3, 2, 1) + Q.transpose(2, 3, 0, 1))
    return Q


def test_q_fit_recovers_identifiable_tensor():
    grid = TorusGrid(2, 64, 32.0)
    Q = _symmetric_Q(0)
    train, held = _probes(16, 1), _probes(4, 2)
    est = estimate_Q_leading(train, _synthetic_values(Q, train, grid, 20000, 3), grid,
                             held, _synthetic_values(Q, held, grid, 20000, 4))
    assert np.max(np.abs(est.Q - Q)) <= 0.1 * np.max(np.abs(Q))
    assert all(h["ok"] for h in est.heldout)
    np.testing.assert_array_equal(est.Q, est.Q.transpose(2, 3, 0, 1))


def test_q_invariant_under_sign_flip_and_doubling_of_g():
    grid = TorusGrid(2, 32, 16.0)
    probes = _probes(12, 7)
    vals = np.random.default_rng(8).standard_normal((300, 12))
    base = estimate_Q_leading(probes, vals, grid)
    flipped = [(g.scaled(-1.0), w) for g, w in probes]
    np.testing.assert_allclose(estimate_Q_leading(flipped, -vals, grid).Q, base.Q, atol=1e-12)
    doubled = [(g.scaled(2.0), w) for g, w in probes]
    est2 = estimate_Q_leading(doubled, 2 * vals, grid)
    np.testing.assert_allclose(est2.train_variances, 4 * base.train_variances, rtol=1e-12)
    np.testing.assert_allclose(est2.Q, base.Q, rtol=1e-9, atol=1e-12)


def test_q_zero_for_vanishing_observables():
    grid = TorusGrid(2, 32, 16.0)
    est = estimate_Q_leading(_probes(12, 9), np.zeros((50, 12)), grid)
    assert not np.any(est.Q) and est.fit_residual == 0.0


def test_q_rejects_underdetermined_design():
    grid = TorusGrid(2, 32, 16.0)
    with pytest.raises(InsufficientSamplesError):
        estimate_Q_leading(_probes(9, 1), np.ones((40, 9)), grid)
    same = _probes(1, 1) * 12
    with pytest.raises(np.linalg.LinAlgError):
        estimate_Q_leading(same, np.random.default_rng(0).standard_normal((40, 12)), grid)


# ---------------------------------------------------------------- Malliavin derivative

def test_malliavin_linear_map_is_exact():
    cfg = EnsembleConfig(coefficient=CoefficientMapSpec("linear", waive_ellipticity=True))
    chk = malliavin_fd_check(cfg, 0, (3, 4), delta=1e-2, scheme="central")
    assert chk.gap <= 1e-12 and chk.support_exact


def test_malliavin_forward_gap_halves_with_step():
    checks = [malliavin_fd_check(SMALL, 0, (5, 5), 0, dl, "forward") for dl in (1e-3, 5e-4, 2.5e-4)]
    for c in checks:
        assert c.support_exact and c.gap <= c.bound
    ratios = [a.gap / b.gap for a, b in zip(checks, checks[1:])]
    assert all(1.8 <= r <= 2.2 for r in ratios)


def test_malliavin_central_difference_is_second_order():
    c = malliavin_fd_check(SMALL, 0, (5, 5), delta=1e-3)
    assert c.gap <= 1e-7 and c.bound is None


@pytest.mark.parametrize("kw", [{"delta": 1e-1}, {"site": (16, 0)}, {"scheme": "backward"}])
def test_malliavin_rejects_bad_arguments(kw):
    args = {"site": (0, 0), "delta": 1e-4, "scheme": "central", **kw}
    with pytest.raises(ConfigError):
        malliavin_fd_check(SMALL, 0, args["site"], delta=args["delta"], scheme=args["scheme"])


# ---------------------------------------------------------------- Poincare inequality

def test_linear_functional_variance_matches_monte_carlo():
    grid = SMALL.grid
    zeta = np.random.default_rng(10).standard_normal((1,) + grid.shape)
    kern = SMALL.kernel()
    X = [np.sum(zeta * build_gaussian_field(sample_white_noise(grid, 1, s), kern).values) * grid.h**2
         for s in range(4000)]
    exact = linear_functional_variance(zeta, SMALL)
    assert abs(np.var(X, ddof=1) / exact - 1) <= 4 * np.sqrt(2 / 3999)


def test_poincare_equality_for_linear_functional():
    grid = SMALL.grid
    zeta = np.random.default_rng(11).standard_normal((1,) + grid.shape)
    kern = SMALL.kernel()

    def linear(noise):
        return float(np.sum(zeta * build_gaussian_field(noise, kern).values) * grid.h**2)

    res = poincare_check(SMALL, linear, [0], block=1, variance=linear_functional_variance(zeta, SMALL))
    assert abs(res.ratio - 1.0) <= 1e-6 and not res.flags


def test_poincare_constant_functional_is_flagged():
    res = poincare_check(SMALL, lambda noise: 1.0, [0, 1], block=4)
    assert res.ratio == 0.0 and "degenerate" in res.flags


def test_poincare_ratio_below_one_for_field_average():
    f, g, _ = _tf(12)
    from homoglab.fluctuations import observable_functional

    fun = observable_functional(SMALL, ObservableSpec("field-average", 0, g=g, f=f), tol=1e-12)
    res = poincare_check(SMALL, fun, range(10), block=2, variance_seeds=range(10, 210))
    assert res.ratio <= 1.0 + 3 * res.ratio_se + 0.2
    assert res.sites_per_seed == 64
