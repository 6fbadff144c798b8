"""Coefficient fields b(t, x, omega), sigma(t, x, omega) and sampling checks of their hypotheses.

All coefficient callables take ``(t, x, omega)`` with ``x`` an ndarray of
positions and return arrays broadcastable to ``x``.  The checks here are spot
checks on finite probe sets; they can refute a declared constant but never
prove one.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

SPOT_CHECK_NOTE = "sampling-based spot check on a finite probe set"


@dataclass(frozen=True)
class CoefficientField:
    drift: Callable
    diffusion: Callable
    m: float
    M: float | None
    kappa: float
    sigma_depends_on_omega: bool = False
    time_dependent: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("ellipticity constant m must be positive")
        if self.kappa < 0:
            raise ValueError("Lipschitz constant kappa must be non-negative")

    def b(self, t: float, x, omega) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.drift(t, x, omega), dtype=float), x.shape)

    def sigma(self, t: float, x, omega) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.diffusion(t, x, omega), dtype=float), x.shape)

    def a(self, t: float, x, omega) -> np.ndarray:
        """Diffusion matrix sigma sigma^T (d = 1: sigma squared)."""
        return self.sigma(t, x, omega) ** 2

    @property
    def omega_free(self) -> bool:
        return self.kappa == 0


@dataclass(frozen=True)
class StableModel:
    """Generator ``b . grad - a(x) |Delta|^(alpha_s / 2)`` with constant stability index."""

    alpha_s: float
    a: Callable
    a_bounds: tuple[float, float]
    drift: Callable
    kappa: float
    a_constant: float | None = None
    time_dependent: bool = False
    name: str = "custom-stable"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        # alpha_s = 2 is admitted only as the Gaussian cross-validation limit
        if not 1.0 < self.alpha_s <= 2.0:
            raise ValueError(f"stability index must lie in (1, 2], got {self.alpha_s}")
        lo, hi = self.a_bounds
        if not (0 < lo <= hi < np.inf):
            raise ValueError(f"a(x) bounds must satisfy 0 < lo <= hi < inf, got {self.a_bounds}")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    def a_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.a(x), dtype=float), x.shape)

    def b(self, t: float, x, omega) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.drift(t, x, omega), dtype=float), x.shape)


# --------------------------------------------------------------------------- catalog


def _ellipticity(sigma: float) -> float:
    # degenerate (sigma = 0) fields are allowed for particle flows; no finite m exists
    return max(sigma**2, sigma**-2) if sigma else math.inf


def _heat(sigma: float = 1.0) -> CoefficientField:
    return CoefficientField(
        drift=lambda t, x, w: 0.0,
        diffusion=lambda t, x, w: sigma,
        m=_ellipticity(sigma),
        M=0.0,
        kappa=0.0,
        name="heat",
        params={"sigma": sigma},
    )


def _constant_drift(b: float = 1.0, sigma: float = 1.0) -> CoefficientField:
    return CoefficientField(
        drift=lambda t, x, w: b,
        diffusion=lambda t, x, w: sigma,
        m=_ellipticity(sigma),
        M=abs(b),
        kappa=0.0,
        name="constant-drift",
        params={"b": b, "sigma": sigma},
    )


def _median_attracting_ou(rate: float = 1.0, coupling: float = 1.0, sigma: float = 1.0) -> CoefficientField:
    # unbounded drift: M is taken as its sup over the scenario box by the reports
    return CoefficientField(
        drift=lambda t, x, w: -rate * (x - coupling * w),
        diffusion=lambda t, x, w: sigma,
        m=_ellipticity(sigma),
        M=None,
        kappa=abs(rate * coupling),
        name="median-attracting-ou",
        params={"rate": rate, "coupling": coupling, "sigma": sigma},
    )


def _ou(rate: float = 1.0, sigma: float = 1.0) -> CoefficientField:
    return CoefficientField(
        drift=lambda t, x, w: -rate * x,
        diffusion=lambda t, x, w: sigma,
        m=_ellipticity(sigma),
        M=None,
        kappa=0.0,
        name="ou",
        params={"rate": rate, "sigma": sigma},
    )


def _variable_diffusion(amplitude: float = 0.5, b: float = 0.0) -> CoefficientField:
    if not 0 <= amplitude < 1:
        raise ValueError("amplitude must lie in [0, 1)")
    return CoefficientField(
        drift=lambda t, x, w: b,
        diffusion=lambda t, x, w: np.sqrt(1.0 + amplitude * np.sin(x)),
        m=max(1 + amplitude, 1 / (1 - amplitude)),
        M=max(abs(b), amplitude),
        kappa=0.0,
        name="variable-diffusion",
        params={"amplitude": amplitude, "b": b},
    )


def _sigma_coupled(strength: float = 0.2, rate: float = 1.0) -> CoefficientField:
    if not 0 <= strength < 1:
        raise ValueError("strength must lie in [0, 1)")
    lo, hi = 1 - strength, 1 + strength
    return CoefficientField(
        drift=lambda t, x, w: -rate * (x - w),
        diffusion=lambda t, x, w: 1.0 + strength * np.tanh(w) + 0.0 * x,
        m=max(hi**2, lo**-2),
        M=None,
        kappa=max(abs(rate), strength),
        sigma_depends_on_omega=True,
        name="sigma-coupled",
        params={"strength": strength, "rate": rate},
    )


def _tanh_drift(gain: float = 2.0, sigma: float = 1.0) -> CoefficientField:
    return CoefficientField(
        drift=lambda t, x, w: np.tanh(gain * w) + 0.0 * x,
        diffusion=lambda t, x, w: sigma,
        m=_ellipticity(sigma),
        M=1.0,
        kappa=abs(gain),
        name="tanh-drift",
        params={"gain": gain, "sigma": sigma},
    )


CATALOG: dict[str, Callable[..., CoefficientField]] = {
    "heat": _heat,
    "constant-drift": _constant_drift,
    "median-attracting-ou": _median_attracting_ou,
    "ou": _ou,
    "variable-diffusion": _variable_diffusion,
    "sigma-coupled": _sigma_coupled,
    "tanh-drift": _tanh_drift,
}


def make_model(key: str, **params) -> CoefficientField:
    try:
        factory = CATALOG[key]
    except KeyError:
        raise KeyError(f"unknown model {key!r}; known: {sorted(CATALOG)}") from None
    return factory(**params)


A_CATALOG: dict[str, Callable] = {
    "constant": lambda value=1.0: (lambda x: value + 0.0 * x, (value, value), value),
    "sinusoidal": lambda mean=1.0, amplitude=0.5: (
        lambda x: mean + amplitude * np.sin(x),
        (mean - amplitude, mean + amplitude),
        None,
    ),
    "bump": lambda mean=1.0, amplitude=0.5: (
        lambda x: mean + amplitude * np.exp(-0.5 * x * x),
        (min(mean, mean + amplitude), max(mean, mean + amplitude)),
        None,
    ),
}


def make_stable_model(alpha_s: float, a_key: str = "constant", a_params: dict | None = None,
                      drift_key: str = "heat", drift_params: dict | None = None) -> StableModel:
    """Stable-like model whose drift is borrowed from a diffusion catalog entry."""
    a_params = a_params or {}
    a_fn, bounds, const = A_CATALOG[a_key](**a_params)
    base = make_model(drift_key, **(drift_params or {}))
    return StableModel(
        alpha_s=alpha_s,
        a=a_fn,
        a_bounds=bounds,
        drift=base.drift,
        kappa=base.kappa,
        a_constant=const,
        time_dependent=base.time_dependent,
        name=f"stable[{a_key}]+{drift_key}",
        params={"alpha_s": alpha_s, "a": {a_key: a_params}, "drift": {drift_key: drift_params or {}}},
    )


# --------------------------------------------------------------------------- table-driven fields


def table_field(t_nodes, x_nodes, omega_nodes, drift_table, diffusion_table, *,
                m: float | None = None, kappa: float | None = None, name: str = "table") -> CoefficientField:
    """Coefficients given on a (t, x, omega) lattice, multilinearly interpolated.

    Queries outside the lattice are clamped to its boundary.  Undeclared m and
    kappa are estimated from the lattice values (finite differences in omega).
    """
    axes = tuple(np.asarray(a, dtype=float) for a in (t_nodes, x_nodes, omega_nodes))
    drift_table = np.asarray(drift_table, dtype=float)
    diffusion_table = np.asarray(diffusion_table, dtype=float)
    shape = tuple(len(a) for a in axes)
    if drift_table.shape != shape or diffusion_table.shape != shape:
        raise ValueError(f"tables must have shape {shape}")
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    drift_i = RegularGridInterpolator(axes, drift_table)
    diff_i = RegularGridInterpolator(axes, diffusion_table)

    def _eval(interp, t, x, w):
        x = np.asarray(x, dtype=float)
        pts = np.stack(np.broadcast_arrays(np.full_like(x, t), x, np.full_like(x, float(np.squeeze(w)))), axis=-1)
        return interp(np.clip(pts, lo, hi))

    a2 = diffusion_table**2
    if m is None:
        m = float(max(a2.max(), 1 / a2.min()))
    sigma_dep = bool(np.ptp(diffusion_table, axis=2).max() > 0) if shape[2] > 1 else False
    if kappa is None:
        kappa = 0.0
        if shape[2] > 1:
            dw = np.diff(axes[2])
            kappa = float(np.max(np.abs(np.diff(drift_table, axis=2)) / dw))
            if sigma_dep:
                kappa = max(kappa, float(np.max(np.abs(np.diff(diffusion_table, axis=2)) / dw)))
    return CoefficientField(
        drift=lambda t, x, w: _eval(drift_i, t, x, w),
        diffusion=lambda t, x, w: _eval(diff_i, t, x, w),
        m=m,
        M=float(np.abs(drift_table).max()),
        kappa=kappa,
        sigma_depends_on_omega=sigma_dep,
        time_dependent=shape[0] > 1,
        name=name,
    )


# --------------------------------------------------------------------------- checks


@dataclass(frozen=True)
class SampleSpec:
    t: np.ndarray
    x: np.ndarray
    omega: np.ndarray
    xi: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    @classmethod
    def box(cls, x_box: tuple[float, float], T: float, omega_box: tuple[float, float] | None = None,
            n: int = 11) -> SampleSpec:
        omega_box = omega_box or x_box
        return cls(
            t=np.linspace(0.0, T, n),
            x=np.linspace(*x_box, n),
            omega=np.linspace(*omega_box, n),
        )


@dataclass(frozen=True)
class EllipticityReport:
    m_declared: float
    m_observed: float
    violations: list
    n_probes: int
    note: str = SPOT_CHECK_NOTE

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class LipschitzReport:
    kappa_declared: float
    kappa_observed: float
    violations: list
    n_probes: int
    note: str = SPOT_CHECK_NOTE

    @property
    def ok(self) -> bool:
        return not self.violations


def ellipticity_check(fld: CoefficientField, spec: SampleSpec, rtol: float = 1e-12) -> EllipticityReport:
    """Check m^-1 |xi|^2 <= (sigma sigma^T xi, xi) <= m |xi|^2 on every probe."""
    violations = []
    lo_obs, hi_obs = np.inf, 0.0
    n = 0
    for t, w in itertools.product(spec.t, spec.omega):
        a = fld.a(t, spec.x, w)
        for xi in spec.xi:
            q = a * xi**2
            ratio = q / xi**2
            lo_obs = min(lo_obs, float(ratio.min()))
            hi_obs = max(hi_obs, float(ratio.max()))
            bad = (ratio < (1 - rtol) / fld.m) | (ratio > fld.m * (1 + rtol))
            violations += [(float(t), float(x), float(w), float(xi)) for x in spec.x[bad]]
            n += len(spec.x)
    return EllipticityReport(fld.m, max(hi_obs, 1 / lo_obs), violations, n)


def lipschitz_check(fld: CoefficientField, spec: SampleSpec, rtol: float = 1e-12) -> LipschitzReport:
    """Worst secant slope of b (and sigma, when it depends on omega) over omega pairs."""
    violations = []
    worst = 0.0
    n = 0
    for t in spec.t:
        for w1, w2 in itertools.combinations(spec.omega, 2):
            if w1 == w2:
                continue
            parts = [np.abs(fld.b(t, spec.x, w1) - fld.b(t, spec.x, w2))]
            if fld.sigma_depends_on_omega:
                parts.append(np.abs(fld.sigma(t, spec.x, w1) - fld.sigma(t, spec.x, w2)))
            slope = np.max(parts, axis=0) / abs(w1 - w2)
            worst = max(worst, float(slope.max()))
            bad = slope > fld.kappa * (1 + rtol) + 1e-15
            violations += [(float(t), float(x), float(w1), float(w2)) for x in spec.x[bad]]
            n += len(spec.x)
    return LipschitzReport(fld.kappa, worst, violations, n)


def omega_invariance_check(fld: CoefficientField, spec: SampleSpec) -> bool:
    """True when sampled sigma never changes with omega (required if the field says so)."""
    for t in spec.t:
        ref = fld.sigma(t, spec.x, spec.omega[0])
        for w in spec.omega[1:]:
            if not np.array_equal(fld.sigma(t, spec.x, w), ref):
                return False
    return True


def regularity_report(fld: CoefficientField, spec: SampleSpec) -> dict:
    """Sampled sup |b| and finite-difference sup |d a / dx| (an estimate, not a bound)."""
    sup_b = 0.0
    sup_da = 0.0
    for t, w in itertools.product(spec.t, spec.omega):
        sup_b = max(sup_b, float(np.abs(fld.b(t, spec.x, w)).max()))
        a = fld.a(t, spec.x, w)
        if len(spec.x) > 1:
            sup_da = max(sup_da, float(np.abs(np.gradient(a, spec.x)).max()))
    return {
        "sup_abs_drift": sup_b,
        "sup_abs_da_dx_estimate": sup_da,
        "M_declared": fld.M,
        "M_is_box_sup": fld.M is None,
        "note": SPOT_CHECK_NOTE,
    }
