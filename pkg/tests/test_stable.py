import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvquant.coeffs import make_model, make_stable_model
from mvquant.density import Density, Grid, quantile
from mvquant.errors import BoundaryMassExceeded, BoundaryTooClose, GridMismatch
from mvquant.kernels import check_derivative_bound, stable_density
from mvquant.linfp import QuantileCurve, solve_linear_fp
from mvquant.nonlinear import PicardConfig
from mvquant.stable import (
    SpectralWorkspace,
    fractional_apply,
    restrict_to_box,
    solve_stable_fp,
    solve_stable_nonlinear,
    stable_dirac,
)

from conftest import gaussian_density
from oracles import gauss, stable_pdf_quad

ZERO = QuantileCurve.constant(0.0)
WIDE = Grid.from_spacing(-50, 50, 0.02)
NARROW = Grid.from_spacing(-10, 10, 0.02)


def l1(u, v, dx):
    return float(np.abs(u - v).sum() * dx)


def stable_start(ws, t):
    v = stable_density(ws.alpha_s, 1.0, t, ws.grid.nodes)
    # the part of the heavy tail beyond the workspace (about 1e-6) is put back by normalisation
    return Density(ws.grid, v / (v.sum() * ws.grid.dx))


@pytest.fixture(scope="module")
def ws15():
    return SpectralWorkspace.build(WIDE, 1.5)


@pytest.fixture(scope="module")
def dirac15(ws15):
    return solve_stable_fp(make_stable_model(1.5), ZERO, stable_dirac(ws15, 0.0, 2), 1.0, 1e-2,
                           workspace=ws15, meta={"xi": 0.0, "mollifier_sd": 2 * WIDE.dx})


# ---------------------------------------------------------------- workspace


def test_workspace_layout(ws15):
    n = ws15.n
    assert n & (n - 1) == 0 and n >= 4 * WIDE.n
    assert ws15.grid.dx == pytest.approx(WIDE.dx)
    # box cells sit on workspace cells
    np.testing.assert_allclose(ws15.restrict(ws15.grid.nodes), WIDE.nodes, atol=1e-9)
    assert np.all(ws15.multiplier >= 0) and ws15.multiplier[0] == 0
    np.testing.assert_allclose(ws15.multiplier, np.abs(ws15.k) ** 1.5)


def test_workspace_embed_restrict_round_trip(ws15):
    v = np.random.default_rng(0).random(WIDE.n)
    e = ws15.embed(v)
    assert e.shape == (ws15.n,) and e.sum() == pytest.approx(v.sum())
    np.testing.assert_array_equal(ws15.restrict(e), v)


@pytest.mark.parametrize("alpha_s", [1.0, 0.5, 2.01])
def test_workspace_index_out_of_range(alpha_s):
    with pytest.raises(ValueError):
        SpectralWorkspace.build(NARROW, alpha_s)


def test_foreign_grid_rejected(ws15):
    with pytest.raises(GridMismatch):
        ws15.to_workspace(gaussian_density(NARROW))


# ---------------------------------------------------------------- fractional operator


def test_index_two_is_laplacian():
    ws = SpectralWorkspace.build(NARROW, 2.0)
    x = ws.grid.nodes
    u = Density(ws.grid, gauss(1.0, x))
    np.testing.assert_allclose(fractional_apply(ws, 1.0, u), (x * x - 1) * gauss(1.0, x), atol=1e-8)


def test_matches_time_derivative_of_stable_law(ws15):
    x = ws15.grid.nodes
    u = Density(ws15.grid, stable_density(1.5, 1.0, 1.0, x), mass_tol=None)
    out = fractional_apply(ws15, 1.0, u)
    idx = np.searchsorted(x, [-20.0, -3.0, -1.0, -0.25, 0.0, 0.5, 1.5, 4.0, 12.0, 45.0])
    np.testing.assert_allclose(out[idx], stable_pdf_quad(1.5, 1.0, x[idx], dt_order=1), atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(
    st.floats(-3, 3), st.floats(0.2, 2.0), st.floats(1.1, 2.0),
    st.sampled_from(["constant", "sinusoidal", "bump"]),
)
def test_fractional_operator_is_mass_neutral(mean, var, alpha_s, a_key):
    ws = SpectralWorkspace.build(NARROW, alpha_s)
    model = make_stable_model(alpha_s, a_key)
    out = fractional_apply(ws, model.a_values, gaussian_density(NARROW, var, mean))
    assert abs(out.sum() * ws.grid.dx) <= 1e-10


def test_seam_guard():
    ws = SpectralWorkspace.build(NARROW, 1.5)
    v = np.zeros(ws.n)
    v[0] = v[-1] = 0.5 / ws.grid.dx
    with pytest.raises(BoundaryMassExceeded):
        fractional_apply(ws, 1.0, Density(ws.grid, v))


# ---------------------------------------------------------------- linear solves


def test_semigroup_of_stable_laws(ws15):
    path = solve_stable_fp(make_stable_model(1.5), ZERO, stable_start(ws15, 0.1), 1.0, 1e-2, workspace=ws15)
    x = ws15.grid.nodes
    for t in (0.5, 1.0):
        i = int(np.argmin(np.abs(path.saved_times - t)))
        assert l1(path.slices[i], stable_density(1.5, 1.0, 0.1 + t, x), WIDE.dx) <= 1e-3


def test_index_two_matches_heat_solver():
    u0 = gaussian_density(NARROW, 0.1)
    stable = solve_stable_fp(make_stable_model(2.0, "constant", {"value": 0.5}), ZERO, u0, 1.0, 1e-3)
    heat = solve_linear_fp(make_model("heat"), ZERO, u0, 1.0, 1e-4)
    ws = SpectralWorkspace.build(NARROW, 2.0)
    assert l1(ws.restrict(stable.final.values), heat.final.values, NARROW.dx) <= 1e-3


def test_constant_drift_advects(ws15):
    model = make_stable_model(1.5, drift_key="constant-drift", drift_params={"b": 1.0})
    path = solve_stable_fp(model, ZERO, stable_start(ws15, 0.1), 1.0, 1e-2, workspace=ws15)
    ref = stable_density(1.5, 1.0, 1.1, ws15.grid.nodes - 1.0)
    assert l1(path.final.values, ref, WIDE.dx) <= 1e-3


def test_mass_conserved_per_slice(ws15):
    model = make_stable_model(1.5, "sinusoidal", drift_key="median-attracting-ou")
    path = solve_stable_fp(model, QuantileCurve.constant(0.3), gaussian_density(WIDE, 0.5), 0.5, 1e-2, workspace=ws15)
    assert np.max(np.abs(path.mass - 1.0)) <= 1e-8
    assert path.meta["alpha_s"] == 1.5 and path.meta["workspace_n"] == ws15.n


def test_symmetry_preserved():
    model = make_stable_model(1.5, "bump", drift_key="median-attracting-ou")
    path = solve_stable_fp(model, ZERO, gaussian_density(NARROW, 0.5), 0.5, 1e-2)
    for v in path.slices:
        assert np.max(np.abs(v - v[::-1])) <= 1e-10


def test_variable_coefficient_converges_in_dt():
    model = make_stable_model(1.5, "sinusoidal", drift_key="median-attracting-ou")
    u0 = gaussian_density(WIDE, 0.5, 0.3)
    q = [quantile(solve_stable_fp(model, ZERO, u0, 1.0, dt).final, 0.5) for dt in (2e-2, 1e-2, 5e-3)]
    # Strang splitting: successive differences shrink by about 4
    assert abs(q[1] - q[0]) / abs(q[2] - q[1]) > 3.0


def test_restrict_and_dirac_start(ws15):
    d = stable_dirac(ws15, 1.0, 2)
    assert restrict_to_box(ws15, d).mass == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(BoundaryTooClose):
        stable_dirac(ws15, 60.0)


def test_workspace_index_must_match(ws15):
    with pytest.raises(ValueError):
        solve_stable_fp(make_stable_model(1.8), ZERO, gaussian_density(WIDE), 0.1, 1e-2, workspace=ws15)


# ---------------------------------------------------------------- heavy tails and scaling


def test_dirac_quantile_scales_like_t_to_one_over_index(dirac15):
    t = dirac15.saved_times
    sel = t >= 0.05
    q = np.array([quantile(dirac15.slice(i, mass_tol=None), 0.8413) for i in np.flatnonzero(sel)])
    slope = np.polyfit(np.log(t[sel]), np.log(q), 1)[0]
    assert slope == pytest.approx(1 / 1.5, abs=0.05)


def test_dirac_tail_is_power_law(dirac15):
    x = dirac15.grid.nodes
    m = (x >= 10) & (x <= 100)
    slope = np.polyfit(np.log(x[m]), np.log(dirac15.final.values[m]), 1)[0]
    assert slope == pytest.approx(-2.5, abs=0.15)


def test_derivative_constant_stable_across_a_decade(dirac15):
    rep = check_derivative_bound(dirac15, t_floor=0.1)
    assert rep.constants["exponent"] == pytest.approx(-1 / 1.5)
    per = np.array(list(rep.details["per_time"].values()))
    assert per.max() / per.min() - 1 <= 0.15


# ---------------------------------------------------------------- nonlinear


def test_symmetric_fixed_point_is_zero():
    model = make_stable_model(1.5, drift_key="median-attracting-ou")
    sol = solve_stable_nonlinear(model, gaussian_density(WIDE, 0.5), 0.5, 1.0, 1e-2)
    assert np.max(np.abs(sol.omega.values)) <= 1e-5 + WIDE.dx
    assert sol.residual <= 1e-6


def test_decoupled_converges_in_two_iterations():
    model = make_stable_model(1.5, drift_key="constant-drift", drift_params={"b": 0.5})
    sol = solve_stable_nonlinear(model, gaussian_density(WIDE, 0.5), 0.5, 1.0, 1e-2, omega0=1.0)
    assert sol.iterations == 2


def test_nonlinear_dirac_start_scaling():
    sol = solve_stable_nonlinear(make_stable_model(1.5), 0.0, 0.8413, 1.0, 1e-2, PicardConfig(n_save=50), box=WIDE)
    t = sol.omega.times
    w = np.ravel(sol.omega.values)
    sel = t >= 0.05
    slope = np.polyfit(np.log(t[sel]), np.log(w[sel]), 1)[0]
    assert slope == pytest.approx(1 / 1.5, abs=0.05)
    assert sol.path.meta["dirac_start"] and sol.path.meta["alpha_s"] == 1.5


def test_point_start_needs_box():
    with pytest.raises(ValueError):
        solve_stable_nonlinear(make_stable_model(1.5), 0.0, 0.5, 1.0, 1e-2)


def test_shifted_start_tracks_its_median():
    model = make_stable_model(1.5, drift_key="median-attracting-ou")
    u0 = gaussian_density(WIDE, 0.5, 1.0)
    sol = solve_stable_nonlinear(model, u0, 0.5, 0.5, 1e-2)
    # b = -(x - omega) with omega the median keeps the symmetric law centred at 1
    assert np.max(np.abs(np.ravel(sol.omega.values) - 1.0)) <= 1e-5 + WIDE.dx
    assert math.isfinite(sol.residual)
