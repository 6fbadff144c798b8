import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvquant.coeffs import CoefficientField, make_model
from mvquant.density import Density, Grid, l1_distance, quantile
from mvquant.errors import BoundaryTooClose, ModeMismatch, NonFiniteValue, StabilityViolation
from mvquant.linfp import (
    QuantileCurve,
    assemble,
    dt_limit,
    duhamel_difference,
    l1_error_against,
    mollified_dirac,
    sensitivity_compare,
    solve_from_dirac,
    solve_linear_fp,
    write_path,
)

from conftest import gaussian_density
from oracles import gauss, gaussian_variance_l1, shifted_gaussian_l1

ZERO = QuantileCurve.constant(0.0, 0.0, 1.0)
HEAT = make_model("heat")


def assert_valid_path(path):
    assert np.all(np.abs(path.mass - 1.0) <= 1e-8)
    assert path.min_value.min() >= -1e-14
    assert path.slices.min() >= 0.0


# ---------------------------------------------------------------- curves


def test_curve_interpolation_and_clamp():
    c = QuantileCurve([0.0, 1.0, 2.0], [0.0, 2.0, 0.0])
    assert c(0.5) == 1.0
    assert c(1.5) == 1.0
    assert c(5.0) == 0.0
    np.testing.assert_allclose(c(np.array([0.25, 1.75])), [0.5, 0.5])


def test_curve_validation():
    with pytest.raises(ValueError):
        QuantileCurve([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        QuantileCurve([0.0, 1.0], [1.0, np.nan])


def test_curve_sup_distance_and_restriction():
    a = QuantileCurve([0.0, 1.0], [0.0, 1.0])
    b = QuantileCurve.constant(0.25, 0.0, 1.0)
    assert a.sup_distance(b) == pytest.approx(0.75)
    r = a.restricted(0.2, 0.6)
    assert r.times[0] == 0.2 and r.times[-1] == 0.6
    assert r(0.4) == pytest.approx(0.4)
    assert a.shifted(1.0)(0.5) == pytest.approx(1.5)


# ---------------------------------------------------------------- exact solutions


def test_heat_matches_gaussian():
    g = Grid.from_spacing(-8, 8, 0.01)
    path = solve_linear_fp(HEAT, ZERO, gaussian_density(g, 0.1), 0.4, 1e-4)
    assert path.T == pytest.approx(0.4)
    assert l1_error_against(path, lambda x: gauss(0.5, x)) <= 1e-3
    assert_valid_path(path)


def test_second_order_convergence():
    errs = []
    for dx, dt in ((0.04, 8e-4), (0.02, 2e-4)):
        g = Grid.from_spacing(-8, 8, dx)
        path = solve_linear_fp(HEAT, ZERO, gaussian_density(g, 0.1), 0.4, dt)
        errs.append(l1_error_against(path, lambda x: gauss(0.5, x)))
    assert errs[0] / errs[1] >= 3.0


def test_ou_stationary():
    g = Grid.from_spacing(-8, 8, 0.02)
    fld = make_model("ou", rate=1.0, sigma=math.sqrt(2.0))
    u0 = gaussian_density(g, 1.0)
    path = solve_linear_fp(fld, ZERO, u0, 1.0, 1e-4)
    for u in path.densities():
        assert l1_distance(u, u0) <= 1e-3
    assert_valid_path(path)


def test_constant_drift_transport():
    g = Grid.from_spacing(-8, 8, 0.01)
    fld = make_model("constant-drift", b=1.0)
    path = solve_linear_fp(fld, ZERO, gaussian_density(g, 0.1, center=-1.0), 1.0, 1e-4)
    assert l1_error_against(path, lambda x: gauss(1.1, x)) <= 1e-3
    assert_valid_path(path)


def test_omega_dependent_drift_follows_curve():
    # b = -(x - omega) with omega_t = t: mean m solves m' = t - m
    g = Grid.from_spacing(-8, 8, 0.02)
    fld = make_model("median-attracting-ou")
    curve = QuantileCurve(np.linspace(0, 1, 101), np.linspace(0, 1, 101))
    path = solve_linear_fp(fld, curve, gaussian_density(g, 0.5), 1.0, 1e-4, track=(0.5,))
    mean = 1.0 - 1.0 + math.exp(-1.0)  # t - 1 + e^-t at t = 1
    # variance stays 1/2 so the median equals the mean
    assert path.quantiles[0.5][-1] == pytest.approx(mean, abs=1e-3)
    assert_valid_path(path)


# ---------------------------------------------------------------- scheme limits


def test_stability_violation():
    g = Grid.from_spacing(-4, 4, 0.01)
    with pytest.raises(StabilityViolation):
        solve_linear_fp(HEAT, ZERO, gaussian_density(g, 0.5), 0.1, 1e-3)


def test_non_finite_coefficients():
    g = Grid.from_spacing(-4, 4, 0.05)
    bad = CoefficientField(lambda t, x, w: np.where(x > 3.9, np.inf, 0.0), lambda t, x, w: 1.0,
                           m=1.0, M=0.0, kappa=0.0)
    with pytest.raises((NonFiniteValue, StabilityViolation)):
        solve_linear_fp(bad, ZERO, gaussian_density(g, 0.5), 0.1, 1e-4)


def test_boundary_alarm_logged(caplog):
    g = Grid.from_spacing(-2, 2, 0.02)
    path = solve_linear_fp(HEAT, ZERO, gaussian_density(g, 0.5), 1.0, 2e-4)
    assert path.meta["boundary_alarm"]
    assert "boundary" in caplog.text
    assert_valid_path(path)


def test_operator_columns_sum_to_zero():
    g = Grid.from_spacing(-5, 5, 0.05)
    fld = make_model("variable-diffusion", amplitude=0.5, b=0.7)
    lower, diag, upper = assemble(fld, g, 0.0, 0.0)
    col = diag.copy()
    col[:-1] += lower
    col[1:] += upper
    np.testing.assert_allclose(col, 0.0, atol=1e-9)
    assert np.all(lower >= 0) and np.all(upper >= 0)


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(0.3, 2.0), st.floats(-2, 2), st.floats(0.0, 0.9))
def test_mass_and_positivity_property(drift, sigma, center, amp):
    g = Grid.from_spacing(-10, 10, 0.05)
    fld = CoefficientField(lambda t, x, w: drift * np.cos(x), lambda t, x, w: sigma * np.sqrt(1 + amp * np.sin(x)),
                           m=10.0, M=None, kappa=0.0)
    dt = 0.5 * dt_limit(assemble(fld, g, 0.0, 0.0)[1])
    path = solve_linear_fp(fld, ZERO, gaussian_density(g, 0.3, center=center), 200 * dt, dt)
    assert_valid_path(path)
    assert np.max(np.abs(np.diff(path.mass))) <= 1e-12


@pytest.mark.parametrize("drift", [5e-324, -5e-324])
def test_subnormal_drift_assembles(drift):
    g = Grid.from_spacing(-10, 10, 0.05)
    fld = CoefficientField(lambda t, x, w: drift * np.cos(x), lambda t, x, w: 1.0 + 0 * x, m=10.0, M=None, kappa=0.0)
    lower, diag, upper = assemble(fld, g, 0.0, 0.0)
    np.testing.assert_allclose(diag[1:-1], -2 * 0.5 / g.dx**2)


# ---------------------------------------------------------------- Dirac starts


def test_dirac_heat_kernel():
    g = Grid.from_spacing(-8, 8, 0.01)
    w = 2 * g.dx
    path = solve_from_dirac(HEAT, ZERO, 0.5, 1.0, 1e-4, grid=g, save_every=100, track=(0.5,))
    assert path.meta["dirac_start"] and path.meta["mollifier_sd"] == w
    for i, t in enumerate(path.saved_times):
        # start-up error scales like dx^2 / t: the mollified start G(w^2, . - xi) is tracked
        # within 1e-3 from t = 128 dx^2, the raw kernel once w^2 / t is small as well
        if t >= 128 * g.dx**2:
            assert l1_error_against(path, lambda x: gauss(t + w * w, x - 0.5), i) <= 1e-3
        if t >= 2000 * g.dx**2:
            assert l1_error_against(path, lambda x: gauss(t, x - 0.5), i) <= 1e-3
    assert np.all(np.abs(path.quantiles[0.5] - 0.5) <= g.dx)
    assert_valid_path(path)


def test_dirac_galilean_shift():
    g = Grid.from_spacing(-8, 8, 0.01)
    fld = make_model("constant-drift", b=1.0)
    path = solve_from_dirac(fld, ZERO, -1.0, 1.0, 1e-4, grid=g, save_every=1000)
    assert l1_error_against(path, lambda x: gauss(1.0, x + 1.0 - 1.0)) <= 1e-3


def test_dirac_margin():
    g = Grid.from_spacing(-4, 4, 0.01)
    with pytest.raises(BoundaryTooClose):
        solve_from_dirac(HEAT, ZERO, 0.5, 1.0, 1e-4, grid=g)


def test_mollifier_is_normalised():
    g = Grid.from_spacing(-2, 2, 0.01)
    u = mollified_dirac(g, 0.1234, 1.0)
    assert u.mass == pytest.approx(1.0, abs=1e-14)
    assert quantile(u, 0.5) == pytest.approx(0.1234, abs=g.dx)


# ---------------------------------------------------------------- sensitivity


def test_sensitivity_identity():
    g = Grid.from_spacing(-8, 8, 0.02)
    rep = sensitivity_compare(HEAT, HEAT, gaussian_density(g, 0.5), 0.2, 1e-4)
    assert np.all(rep.distance == 0.0)


def test_sensitivity_drift_gap_against_shift_oracle():
    g = Grid.from_spacing(-8, 8, 0.01)
    eps = 0.01
    f2 = make_model("constant-drift", b=eps)
    rep = sensitivity_compare(HEAT, f2, gaussian_density(g, 0.5), 1.0, 1e-4)
    assert rep.mode == "drift"
    assert rep.sup_coefficient_gap == pytest.approx(eps)
    assert rep.bounded
    oracle = np.array([shifted_gaussian_l1(0.5 + t, eps * t) for t in rep.times])
    window = rep.times >= 0.01
    np.testing.assert_allclose(rep.distance[window], oracle[window], rtol=0.05)


def test_sensitivity_general_mode():
    g = Grid.from_spacing(-8, 8, 0.01)
    f2 = make_model("heat", sigma=math.sqrt(1.1))
    u0 = gaussian_density(g, 0.5)
    with pytest.raises(ModeMismatch):
        sensitivity_compare(HEAT, f2, u0, 0.5, 1e-4, mode="drift")
    rep = sensitivity_compare(HEAT, f2, u0, 0.5, 1e-4)
    assert rep.mode == "general" and rep.bounded
    oracle = np.array([gaussian_variance_l1(0.5 + t, 0.5 + 1.1 * t) for t in rep.times])
    window = rep.times >= 0.01
    np.testing.assert_allclose(rep.distance[window], oracle[window], rtol=0.05)


def test_duhamel_identity():
    g = Grid.from_spacing(-8, 8, 0.02)
    f2 = make_model("constant-drift", b=0.3, sigma=1.2)
    u0 = gaussian_density(g, 0.5)
    t, dt = 0.5, 1e-4
    diff = (solve_linear_fp(HEAT, ZERO, u0, t, dt).final.values
            - solve_linear_fp(f2, ZERO, u0, t, dt).final.values)
    approx = duhamel_difference(HEAT, f2, u0, t, dt, n_quad=16)
    rel = np.abs(approx - diff).sum() / np.abs(diff).sum()
    assert rel <= 0.05


# ---------------------------------------------------------------- export


def test_write_path(tmp_path):
    g = Grid.from_spacing(-4, 4, 0.05)
    path = solve_linear_fp(HEAT, ZERO, gaussian_density(g, 0.3), 0.1, 1e-3, save_every=50)
    files = write_path(path, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["scheme"] == path.meta["scheme"]
    assert manifest["dt"] == pytest.approx(1e-3)
    assert len(manifest["slices"]) == len(path.saved_index) == len(files) - 1
    assert manifest["mass_drift"] <= 1e-12
