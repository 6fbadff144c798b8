"""Linear Fokker-Planck solves along a prescribed quantile curve.

Solves ``du/dt = 1/2 d2/dx2 [sigma^2 u] - d/dx [b u]`` on a truncated 1-d box
with coefficients frozen at ``omega(t)``.  The scheme is a finite-volume flux
form with zero-flux walls, Crank-Nicolson in time, and Chang-Cooper style
drift weights: central where the cell Peclet number allows it, shifted
towards upwind just enough to keep the off-diagonals non-negative.  Together
with the explicit-half step restriction this keeps every slice non-negative
and the mass constant to round-off.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._tridiag import chang_cooper_weights, cn_factor, cn_step, cn_step_factored
from .coeffs import CoefficientField
from .density import (
    MASS_TOL,
    PLATEAU_TOL,
    Density,
    Grid,
    _quantile_from_cdf,
    l1_distance,
    quantile,
    sobolev_norm,
)
from .errors import (
    BoundaryTooClose,
    MassDriftExceeded,
    ModeMismatch,
    NonFiniteValue,
    StabilityViolation,
)

log = logging.getLogger(__name__)

SCHEME = "fv-crank-nicolson/chang-cooper"
BOUNDARY_ALARM = 1e-6


@dataclass(frozen=True, eq=False)
class QuantileCurve:
    """Piecewise-linear curve t -> omega_t in R^d on a strictly increasing time grid."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or len(t) < 1 or v.shape[0] != len(t):
            raise ValueError("times and values must have matching lengths")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("curve values must be finite")
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value, t_start: float = 0.0, t_end: float = 1.0) -> QuantileCurve:
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.array([t_start, t_end]), np.vstack([v, v]))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, t):
        """Value at time(s) t; clamped outside the grid.  Scalar for d = 1."""
        if self.dim == 1:
            if len(self.times) == 1:
                return float(self.values[0, 0]) if np.ndim(t) == 0 else np.full(np.shape(t), self.values[0, 0])
            out = np.interp(t, self.times, self.values[:, 0])
            return float(out) if np.ndim(t) == 0 else out
        cols = [np.interp(t, self.times, self.values[:, j]) for j in range(self.dim)]
        return np.stack(cols, axis=-1)

    def sup_distance(self, other: QuantileCurve) -> float:
        """Sup over the union of both time grids of the per-coordinate max difference."""
        t = np.union1d(self.times, other.times)
        a = np.atleast_2d(np.asarray(self(t)).T).T if self.dim > 1 else np.asarray(self(t))[:, None]
        b = np.atleast_2d(np.asarray(other(t)).T).T if other.dim > 1 else np.asarray(other(t))[:, None]
        return float(np.max(np.abs(a - b)))

    def shifted(self, c) -> QuantileCurve:
        return QuantileCurve(self.times, self.values + np.atleast_1d(c))

    def restricted(self, t_start: float, t_end: float) -> QuantileCurve:
        mask = (self.times > t_start) & (self.times < t_end)
        t = np.concatenate(([t_start], self.times[mask], [t_end]))
        return QuantileCurve(t, np.asarray(self(t)).reshape(len(t), -1))


@dataclass(frozen=True, eq=False)
class DensityPath:
    """Solver output: per-step diagnostics at every node, density slices at saved nodes."""

    grid: Grid
    times: np.ndarray
    saved_index: np.ndarray
    slices: np.ndarray
    mass: np.ndarray
    min_value: np.ndarray
    clipped_mass: np.ndarray
    quantiles: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def saved_times(self) -> np.ndarray:
        return self.times[self.saved_index]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def slice(self, i: int, *, mass_tol: float | None = MASS_TOL) -> Density:
        return Density(self.grid, self.slices[i], mass_tol=mass_tol)

    def densities(self, *, mass_tol: float | None = MASS_TOL):
        return [self.slice(i, mass_tol=mass_tol) for i in range(len(self.saved_index))]

    @property
    def initial(self) -> Density:
        return self.slice(0)

    @property
    def final(self) -> Density:
        return self.slice(-1)

    def at(self, t: float) -> Density:
        """Saved slice at time t (must coincide with a saved node to within half a step)."""
        st = self.saved_times
        i = int(np.argmin(np.abs(st - t)))
        if abs(st[i] - t) > 0.5 * self.meta.get("dt", 0.0) + 1e-12:
            raise KeyError(f"no saved slice at t={t}; nearest is {st[i]}")
        return self.slice(i)

    def quantile_curve(self, alpha: float) -> QuantileCurve:
        return QuantileCurve(self.times, self.quantiles[float(alpha)])

    @property
    def max_mass_drift(self) -> float:
        return float(np.max(np.abs(self.mass - self.mass[0])))


# --------------------------------------------------------------------------- operator assembly


def assemble(fld: CoefficientField, grid: Grid, t: float, omega) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tridiagonal generator (lower, diag, upper) of the semi-discrete equation du/dt = A u."""
    ops, _ = _assemble(fld, grid, t, omega)
    return ops


def _assemble(fld, grid, t, omega):
    D = 0.5 * np.ascontiguousarray(fld.a(t, grid.nodes, omega), dtype=float)
    b = np.ascontiguousarray(fld.b(t, grid.edges[1:-1], omega), dtype=float)
    if not (np.isfinite(D.sum()) and np.isfinite(b.sum())):
        raise NonFiniteValue(f"non-finite coefficient at t={t}, omega={omega}")
    n = grid.n
    left, diag, right = np.empty(n - 1), np.empty(n), np.empty(n - 1)
    worst = chang_cooper_weights(D, b, grid.dx, left, diag, right)
    limit = np.inf if worst <= 0 else 2.0 / worst
    return (left, diag, right), limit


def dt_limit(diag: np.ndarray) -> float:
    """Largest step keeping the explicit Crank-Nicolson half non-negative."""
    worst = float(np.max(-diag))
    return np.inf if worst <= 0 else 2.0 / worst


def apply_operator(lower, diag, upper, u: np.ndarray) -> np.ndarray:
    out = diag * u
    out[:-1] += upper * u[1:]
    out[1:] += lower * u[:-1]
    return out


class LinearFPStepper:
    """Crank-Nicolson stepper with coefficients frozen at each step's midpoint."""

    def __init__(self, fld: CoefficientField, omega: QuantileCurve | Callable, grid: Grid, dt: float):
        self.field = fld
        self.omega = omega
        self.grid = grid
        self.dt = dt
        self._key = None
        self._ops = None
        self._repeat = False
        self._factors = None
        self._work = np.empty(grid.n)

    def operator(self, t: float):
        w = self.omega(t)
        key = (t if self.field.time_dependent else None, None if self.field.omega_free else w)
        if self._ops is not None and key == self._key:
            self._repeat = True
            return self._ops
        ops, limit = _assemble(self.field, self.grid, t, w)
        if self.dt > limit * (1 + 1e-12):
            raise StabilityViolation(f"dt={self.dt:.3e} exceeds the positivity limit {limit:.3e} at t={t:.4g}")
        self._key, self._ops, self._repeat, self._factors = key, ops, False, None
        return ops

    def step(self, u: np.ndarray, t: float) -> np.ndarray:
        """Advance from t to t + dt; returns a new array."""
        h = 0.5 * self.dt
        lower, diag, upper = self.operator(t + h)
        if not self._repeat:
            return cn_step(lower, diag, upper, u, h, np.empty_like(u), self._work)
        if self._factors is None:
            self._factors = (np.empty(self.grid.n), np.empty(self.grid.n))
            cn_factor(lower, diag, upper, h, *self._factors)
        return cn_step_factored(lower, diag, upper, h, *self._factors, u, np.empty_like(u))


def _steps(T: float, dt: float) -> tuple[int, float]:
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    n = max(1, math.ceil(T / dt - 1e-9))
    return n, T / n


def _save_stride(n_steps: int, save_every: int | None, n_save: int) -> int:
    if save_every is not None:
        return max(1, int(save_every))
    return max(1, n_steps // n_save) if n_steps > n_save else 1


class _Recorder:
    """Collects per-step diagnostics and saved slices for a DensityPath."""

    def __init__(self, grid: Grid, n_steps: int, stride: int, track: Sequence[float], t0: float, dt: float):
        self.grid = grid
        self.stride = stride
        self.n_steps = n_steps
        self.times = t0 + dt * np.arange(n_steps + 1)
        self.mass = np.empty(n_steps + 1)
        self.min_value = np.empty(n_steps + 1)
        self.clipped = np.zeros(n_steps + 1)
        self.track = [float(a) for a in track]
        self.quantiles = {a: np.empty(n_steps + 1) for a in self.track}
        self.saved_index: list[int] = []
        self.slices: list[np.ndarray] = []
        self._C = np.empty(grid.n + 1)

    def record(self, k: int, u: np.ndarray, raw_min: float, clipped: float) -> None:
        dx = self.grid.dx
        C = self._C
        C[0] = 0.0
        np.cumsum(u, out=C[1:])
        C[1:] *= dx
        self.mass[k] = C[-1]
        self.min_value[k] = raw_min
        self.clipped[k] = clipped
        for a in self.track:
            self.quantiles[a][k] = _quantile_from_cdf(self.grid.edges, C, a, False, PLATEAU_TOL)
        if k % self.stride == 0 or k == self.n_steps:
            self.saved_index.append(k)
            self.slices.append(u.copy())

    def path(self, meta: dict) -> DensityPath:
        slices = np.array(self.slices)
        slices.flags.writeable = False
        for a in self.quantiles.values():
            a.flags.writeable = False
        return DensityPath(
            grid=self.grid,
            times=self.times,
            saved_index=np.array(self.saved_index),
            slices=slices,
            mass=self.mass,
            min_value=self.min_value,
            clipped_mass=self.clipped,
            quantiles=self.quantiles,
            meta=meta,
        )


def clip_negative(u: np.ndarray) -> tuple[float, float]:
    """Zero out negative round-off in place; returns (raw minimum, clipped mass density sum)."""
    raw_min = float(u.min())
    if raw_min >= 0:
        return raw_min, 0.0
    neg = u < 0
    clipped = float(-u[neg].sum())
    u[neg] = 0.0
    return raw_min, clipped


def solve_linear_fp(
    fld: CoefficientField,
    omega: QuantileCurve | Callable,
    u0: Density,
    T: float,
    dt: float,
    *,
    t0: float = 0.0,
    track: Sequence[float] = (),
    save_every: int | None = None,
    n_save: int = 200,
    mass_tol: float = MASS_TOL,
    meta: dict | None = None,
) -> DensityPath:
    """Evolve u0 over [t0, t0 + T] with coefficients evaluated along omega.

    Per-step mass, minimum and tracked quantiles are kept at every node;
    density slices are stored every ``save_every`` steps (default: about
    ``n_save`` slices) plus the first and last.
    """
    grid = u0.grid
    n_steps, dt = _steps(T, dt)
    stepper = LinearFPStepper(fld, omega, grid, dt)
    rec = _Recorder(grid, n_steps, _save_stride(n_steps, save_every, n_save), track, t0, dt)
    u = np.array(u0.values, dtype=float)
    rec.record(0, u, float(u.min()), 0.0)
    m0 = rec.mass[0]
    alarm = False
    for k in range(n_steps):
        t = t0 + k * dt
        u = stepper.step(u, t)
        if not np.all(np.isfinite(u)):
            raise NonFiniteValue(f"non-finite density at t={t + dt:.6g}")
        raw_min, clipped = clip_negative(u)
        rec.record(k + 1, u, raw_min, clipped * grid.dx)
        if abs(rec.mass[k + 1] - m0) > mass_tol:
            raise MassDriftExceeded(f"mass drifted by {rec.mass[k + 1] - m0:.3e} at t={t + dt:.6g}")
        if not alarm and (u[0] + u[-1]) * grid.dx > BOUNDARY_ALARM:
            alarm = True
            log.warning("boundary cells carry mass %.3e at t=%.4g; widen the box", (u[0] + u[-1]) * grid.dx, t + dt)
    info = {
        "scheme": SCHEME,
        "dx": grid.dx,
        "dt": dt,
        "T": T,
        "t0": t0,
        "mass_drift": float(np.max(np.abs(rec.mass - m0))),
        "max_step_mass_drift": float(np.max(np.abs(np.diff(rec.mass)))) if n_steps else 0.0,
        "min_value": float(rec.min_value.min()),
        "boundary_alarm": alarm,
        "model": fld.name,
    }
    info.update(meta or {})
    return rec.path(info)


def concat_paths(paths: Sequence[DensityPath]) -> DensityPath:
    """Join consecutive paths whose end and start nodes coincide (window chaining)."""
    paths = list(paths)
    if len(paths) == 1:
        return paths[0]
    first = paths[0]
    times, idx, slices = [first.times], [first.saved_index], [first.slices]
    mass, mins, clipped = [first.mass], [first.min_value], [first.clipped_mass]
    quants = {a: [q] for a, q in first.quantiles.items()}
    offset = len(first.times) - 1
    for p in paths[1:]:
        if p.grid != first.grid or abs(p.times[0] - times[-1][-1]) > 1e-9:
            raise ValueError("paths are not consecutive on one grid")
        times.append(p.times[1:])
        keep = p.saved_index > 0
        idx.append(p.saved_index[keep] + offset)
        slices.append(p.slices[keep])
        mass.append(p.mass[1:])
        mins.append(p.min_value[1:])
        clipped.append(p.clipped_mass[1:])
        for a in quants:
            quants[a].append(p.quantiles[a][1:])
        offset += len(p.times) - 1
    mass = np.concatenate(mass)
    meta = dict(first.meta)
    meta.update(
        T=float(paths[-1].times[-1] - first.times[0]),
        mass_drift=float(np.max(np.abs(mass - mass[0]))),
        min_value=float(min(p.meta.get("min_value", 0.0) for p in paths)),
        boundary_alarm=any(p.meta.get("boundary_alarm", False) for p in paths),
        windows=[(float(p.times[0]), float(p.times[-1])) for p in paths],
    )
    return DensityPath(
        grid=first.grid,
        times=np.concatenate(times),
        saved_index=np.concatenate(idx),
        slices=np.concatenate(slices),
        mass=mass,
        min_value=np.concatenate(mins),
        clipped_mass=np.concatenate(clipped),
        quantiles={a: np.concatenate(q) for a, q in quants.items()},
        meta=meta,
    )


# --------------------------------------------------------------------------- Dirac starts


def mollified_dirac(grid: Grid, xi: float, width_cells: float = 2.0) -> Density:
    """Grid mollification of a point mass: Gaussian of standard deviation width_cells * dx, renormalised."""
    s = width_cells * grid.dx
    vals = np.exp(-0.5 * ((grid.nodes - xi) / s) ** 2)
    vals /= vals.sum() * grid.dx
    return Density(grid, vals)


def check_margin(grid: Grid, xi: float, m: float, T: float) -> None:
    margin = 4.0 * math.sqrt(m * T)
    if xi - grid.x_min < margin or grid.x_max - xi < margin:
        raise BoundaryTooClose(f"xi={xi} is closer than 4 sqrt(mT)={margin:.3g} to the box edge")


def solve_from_dirac(
    fld: CoefficientField,
    omega: QuantileCurve | Callable,
    xi: float,
    T: float,
    dt: float,
    *,
    grid: Grid,
    width_cells: float = 2.0,
    **kwargs,
) -> DensityPath:
    check_margin(grid, xi, fld.m, T)
    u0 = mollified_dirac(grid, xi, width_cells)
    meta = {"dirac_start": True, "xi": xi, "mollifier_sd": width_cells * grid.dx, "mollifier_cells": width_cells}
    meta.update(kwargs.pop("meta", None) or {})
    return solve_linear_fp(fld, omega, u0, T, dt, meta=meta, **kwargs)


# --------------------------------------------------------------------------- sensitivity


@dataclass(frozen=True)
class SensitivityComparison:
    mode: str
    times: np.ndarray
    distance: np.ndarray
    ratio: np.ndarray
    sup_ratio: float
    t_at_sup: float
    sup_coefficient_gap: float
    norm_factor: float
    bounded: bool


def _coefficient_gaps(f1, f2, omega, grid: Grid, times) -> tuple[float, float]:
    da = db = 0.0
    for t in times:
        w = omega(t)
        da = max(da, float(np.max(np.abs(f1.a(t, grid.nodes, w) - f2.a(t, grid.nodes, w)))))
        db = max(db, float(np.max(np.abs(f1.b(t, grid.nodes, w) - f2.b(t, grid.nodes, w)))))
    return da, db


def sensitivity_compare(
    f1: CoefficientField,
    f2: CoefficientField,
    u0: Density,
    T: float,
    dt: float,
    *,
    omega: QuantileCurve | Callable | None = None,
    mode: str = "auto",
    t_floor: float = 0.01,
    probe_times: int = 11,
) -> SensitivityComparison:
    """Track ||u1_t - u2_t||_1 against sqrt(t) * sup coefficient gap * norm factor.

    mode ``"drift"`` needs equal diffusions and normalises by ||u0||_1; mode
    ``"general"`` uses the summed a/b gap and the order-2 Sobolev norm of u0.
    """
    if omega is None:
        omega = QuantileCurve.constant(quantile(u0, 0.5), 0.0, T)
    grid = u0.grid
    n_steps, dt = _steps(T, dt)
    da, db = _coefficient_gaps(f1, f2, omega, grid, np.linspace(0, T, probe_times))
    if mode == "auto":
        mode = "drift" if da == 0 else "general"
    if mode == "drift":
        if da != 0:
            raise ModeMismatch(f"drift mode needs identical diffusions (sup |a1 - a2| = {da:.3e})")
        gap, norm = db, float(np.abs(u0.values).sum() * grid.dx)
    elif mode == "general":
        gap, norm = da + db, sobolev_norm(u0, 2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    s1 = LinearFPStepper(f1, omega, grid, dt)
    s2 = LinearFPStepper(f2, omega, grid, dt)
    u1 = np.array(u0.values, dtype=float)
    u2 = u1.copy()
    times = dt * np.arange(1, n_steps + 1)
    dist = np.empty(n_steps)
    for k in range(n_steps):
        t = k * dt
        u1 = s1.step(u1, t)
        u2 = s2.step(u2, t)
        clip_negative(u1)
        clip_negative(u2)
        dist[k] = np.abs(u1 - u2).sum() * grid.dx
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = dist / (np.sqrt(times) * gap * norm) if gap > 0 else np.zeros_like(dist)
    window = times >= t_floor - 1e-12
    if not np.any(window):
        window = np.ones_like(times, dtype=bool)
    r = ratio[window]
    i = int(np.argmax(r))
    bounded = bool(np.all(np.isfinite(r)) and (gap == 0 or i > 0))
    return SensitivityComparison(
        mode=mode,
        times=times,
        distance=dist,
        ratio=ratio,
        sup_ratio=float(r[i]),
        t_at_sup=float(times[window][i]),
        sup_coefficient_gap=gap,
        norm_factor=norm,
        bounded=bounded,
    )


def duhamel_difference(
    f1: CoefficientField,
    f2: CoefficientField,
    u0: Density,
    t: float,
    dt: float,
    *,
    omega: QuantileCurve | Callable | None = None,
    n_quad: int = 16,
) -> np.ndarray:
    """Quadrature of int_0^t U2(t, s) (A1 - A2) U1(s, 0) u0 ds, the propagator comparison identity.

    A_i are the discrete Fokker-Planck generators; the result approximates u1_t - u2_t.
    """
    if n_quad % 2:
        raise ValueError("Simpson quadrature needs an even number of intervals")
    if omega is None:
        omega = QuantileCurve.constant(0.0, 0.0, t)
    grid = u0.grid
    n_steps = n_quad * math.ceil(_steps(t, dt)[0] / n_quad)
    dt = t / n_steps
    stride = n_steps // n_quad
    path1 = solve_linear_fp(f1, omega, u0, t, dt, save_every=stride)
    weights = np.ones(n_quad + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights *= (t / n_quad) / 3.0
    total = np.zeros(grid.n)
    for q in range(n_quad + 1):
        s = q * stride * dt
        us = path1.slices[q]
        A1 = assemble(f1, grid, s, omega(s))
        A2 = assemble(f2, grid, s, omega(s))
        g = apply_operator(*A1, us) - apply_operator(*A2, us)
        stepper = LinearFPStepper(f2, omega, grid, dt)
        for k in range(q * stride, n_steps):
            g = stepper.step(g, k * dt)
        total += weights[q] * g
    return total


# --------------------------------------------------------------------------- export


def write_path(path: DensityPath, out_dir: str | Path, *, prefix: str = "slice") -> list[Path]:
    """Write one CSV per saved slice plus ``manifest.json``; returns the files written."""
    from .density import save_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, k in enumerate(path.saved_index):
        f = out / f"{prefix}_{int(k):07d}.csv"
        save_csv(path.slice(i, mass_tol=None), f)
        files.append(f)
    manifest = {
        "scheme": path.meta.get("scheme"),
        "dx": path.grid.dx,
        "dt": path.meta.get("dt"),
        "T": path.meta.get("T"),
        "mass_drift": path.max_mass_drift,
        "grid": {"x_min": path.grid.x_min, "x_max": path.grid.x_max, "n": path.grid.n},
        "slices": [{"file": f.name, "t": float(path.times[k])} for f, k in zip(files, path.saved_index)],
        "meta": {k: v for k, v in path.meta.items() if isinstance(v, (int, float, str, bool, type(None)))},
    }
    mf = out / "manifest.json"
    mf.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files.append(mf)
    return files


def l1_error_against(path: DensityPath, exact: Callable[[np.ndarray], np.ndarray], i: int = -1) -> float:
    """L1 distance between a saved slice and a function sampled at the cell centres."""
    ref = Density(path.grid, exact(path.grid.nodes), mass_tol=None)
    return l1_distance(path.slice(i, mass_tol=None), ref)
