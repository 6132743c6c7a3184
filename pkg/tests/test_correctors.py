import numpy as np
import pytest
from hypothesis import given, strategies as st

from homoglab import calculus as dc
from homoglab.correctors import (CorrectorSet, HierarchyError, build_hierarchy, corrector_growth_stats,
                                 corrector_level, ensemble_tensors, even_order_symmetric_part,
                                 stationary_order, sym, symmetry_identity_residual)
from homoglab.gaussian_field import TorusGrid, constant_coefficient

from conftest import random_coefficient


def test_stationary_order():
    assert [stationary_order(d) for d in (1, 2, 3)] == [1, 1, 2]


@pytest.mark.parametrize("c", [1.0, 0.7])
def test_constant_coefficient_collapses_hierarchy(c):
    grid = TorusGrid(2, 16, 8.0)
    cs = build_hierarchy(constant_coefficient(grid, c), 3)
    np.testing.assert_array_equal(cs.phi[0], 1.0)
    assert not np.any(cs.sigma[0])
    for n in range(1, 4):
        assert np.max(np.abs(cs.phi[n])) <= 1e-14
        assert np.max(np.abs(cs.q[n])) <= 1e-14
        assert np.max(np.abs(cs.sigma[n])) <= 1e-14
    np.testing.assert_allclose(cs.abar[1].entries, c * np.eye(2), atol=1e-15)
    assert np.max(np.abs(cs.abar[2].entries)) <= 1e-15
    assert np.max(np.abs(cs.abar[3].entries)) <= 1e-15


def test_one_dimensional_closed_form():
    coef = random_coefficient(d=1, N=64, L=32.0, seed=3)
    cs = build_hierarchy(coef, 1, 1e-12)
    a_edge = coef.operator.edge_diag[0]
    harmonic = 1.0 / np.mean(1.0 / a_edge)
    assert abs(cs.abar[1].entries[0, 0] - harmonic) <= 1e-12
    gphi = dc.grad(cs.phi[1][0], coef.grid.h)[0]
    assert np.max(np.abs(gphi - (harmonic / a_edge - 1.0))) <= 1e-10


@pytest.mark.parametrize("kind", ["clipped-sigmoid-isotropic", "nonsymmetric-with-skew-part"])
def test_exact_class_residuals(kind):
    coef = random_coefficient(N=32, L=16.0, seed=7, kind=kind)
    cs = build_hierarchy(coef, 2, 1e-10)
    h = coef.grid.h
    for n in (1, 2):
        res = cs.residuals[n]
        assert res["equation"] <= 1e-10
        assert res["mean_q"] <= 1e-13
        assert res["mean_phi"] <= 1e-13
        assert res["div_sigma_minus_q"] <= 1e-8
    # residual contract of the first level, recomputed from scratch
    for i in range(2):
        e = np.zeros((2,) + coef.grid.shape)
        e[i] = 1.0
        lhs = dc.div(coef.operator(dc.grad(cs.phi[1][i], h) + e), h)
        assert np.linalg.norm(lhs) <= 1e-10 * np.linalg.norm(dc.div(coef.operator(e), h))


def test_flux_mean_vanishes_per_sample():
    for seed in range(20):
        cs = build_hierarchy(random_coefficient(seed=seed), 2)
        assert cs.residuals[2]["mean_q"] <= 1e-13


def test_sigma_storage_is_skew_by_construction():
    cs = build_hierarchy(random_coefficient(seed=2), 1)
    s = cs.sigma[1][0]
    np.testing.assert_array_equal(dc.skew_component(s, 0, 1, 2), -dc.skew_component(s, 1, 0, 2))


def test_dual_of_symmetric_coefficient_equals_primal():
    coef = random_coefficient(seed=11)
    a = build_hierarchy(coef, 2)
    b = build_hierarchy(coef.transpose(), 2)
    for n in (1, 2):
        assert np.max(np.abs(a.phi[n] - b.phi[n])) <= 1e-9
        np.testing.assert_allclose(a.abar[n].entries, b.abar[n].entries, atol=1e-10)


def test_first_order_symmetry_is_transpose():
    coef = random_coefficient(seed=5, kind="nonsymmetric-with-skew-part")
    cs, ds = build_hierarchy(coef, 1), build_hierarchy(coef.transpose(), 1)
    assert symmetry_identity_residual(cs, ds, 1) <= 1e-10


def test_second_order_symmetry_constant_coefficient_is_exact():
    coef = constant_coefficient(TorusGrid(2, 16, 8.0), 0.7)
    cs = build_hierarchy(coef, 2)
    assert symmetry_identity_residual(cs, build_hierarchy(coef.transpose(), 2), 2) == 0.0


def test_symmetry_residual_needs_order():
    cs = build_hierarchy(random_coefficient(), 1)
    with pytest.raises(HierarchyError):
        symmetry_identity_residual(cs, cs, 2)


def test_even_order_symmetric_part_decays_under_refinement():
    # the same coarse-grained noise sampled at three resolutions
    from homoglab.gaussian_field import (CoefficientMapSpec, build_gaussian_field, coarsen_noise,
                                         coefficient_from_field, raised_cosine_kernel,
                                         sample_white_noise)

    fine = sample_white_noise(TorusGrid(2, 128, 8.0), 1, 1)
    vals = []
    for N in (32, 64, 128):
        noise = fine
        while noise.grid.N > N:
            noise = coarsen_noise(noise)
        kern = raised_cosine_kernel(2, noise.grid.h, 1.0)
        coef = coefficient_from_field(build_gaussian_field(noise, kern), CoefficientMapSpec())
        vals.append(even_order_symmetric_part(build_hierarchy(coef, 2).abar, 2))
    assert vals[0] / vals[1] >= 1.5 and vals[1] / vals[2] >= 1.5


def test_hierarchy_level_needs_positive_order():
    coef = random_coefficient()
    with pytest.raises(ValueError):
        corrector_level(coef, None, None, 0)
    with pytest.raises(ValueError):
        build_hierarchy(coef, 0)


def test_hierarchy_flags_orders_beyond_stationary_theory():
    cs = build_hierarchy(random_coefficient(), 2)
    assert cs.beyond_stationary == [False, False, True]


def test_ensemble_tensors_average_and_stderr():
    sets = [build_hierarchy(random_coefficient(seed=s), 1) for s in range(4)]
    out = ensemble_tensors(sets)
    stack = np.stack([cs.abar[1].entries for cs in sets])
    np.testing.assert_allclose(out[1].entries, stack.mean(0))
    np.testing.assert_allclose(out[1].stderr, stack.std(0, ddof=1) / 2)
    assert out[1].count == 4 and out[1].provenance == "ensemble"
    with pytest.raises(ValueError):
        ensemble_tensors([])


@given(seed=st.integers(0, 1000))
def test_sym_is_idempotent_projection(seed):
    T = np.random.default_rng(seed).standard_normal((2, 2, 2))
    S = sym(T, (0, 1, 2))
    np.testing.assert_allclose(sym(S, (0, 1, 2)), S, atol=1e-15)
    np.testing.assert_allclose(S, np.transpose(S, (1, 0, 2)), atol=1e-15)


# ---------------------------------------------------------------- growth statistics

def _ensembles(coef_for, eps_list, seeds):
    return {e: [build_hierarchy(coef_for(e, s), 1) for s in seeds] for e in eps_list}


def test_growth_stats_degenerate_for_identity():
    def ident(e, s):
        return constant_coefficient(TorusGrid(2, int(2 / e), 1 / e))

    g = corrector_growth_stats(_ensembles(ident, [1 / 4, 1 / 8, 1 / 16], range(50)), 1)
    assert g.degenerate
    assert not np.any(g.grad_moment) and not np.any(g.average_variance)


def test_growth_stats_structure():
    def sample(e, s):
        return random_coefficient(N=int(2 / e), L=1 / e, seed=s)

    g = corrector_growth_stats(_ensembles(sample, [1 / 4, 1 / 8, 1 / 16], range(50)), 1)
    assert not g.degenerate and g.predicted_slope == 0.0
    assert np.all(g.average_variance > 0) and np.isfinite(g.slope) and g.slope_se > 0
    assert g.log_coefficient is not None and len(g.variogram) == 8
    # gradient moments are a property of the microscopic medium, not of L
    assert g.grad_moment_spread() < 5


def test_growth_stats_validates_inputs():
    coef = random_coefficient()
    cs = [build_hierarchy(coef, 1)]
    with pytest.raises(ValueError):
        corrector_growth_stats({0.125: cs}, 1)
    with pytest.raises(ValueError):
        corrector_growth_stats({0.125: cs}, 2)
