"""Densities of stable-like processes: du/dt = -|D|^alpha_s [a u] - d/dx [b u].

The fractional term is discretised spectrally on a periodic workspace that
embeds the scenario box with at least eight times its width, so the periodic
seam sits far out in the tails.  Each step is a Strang splitting: drift half
step, fractional full step, drift half step.  The fractional step is the exact
exponential when ``a`` is constant and Crank-Nicolson (solved by a
preconditioned fixed-point iteration) otherwise.  The drift step is
Crank-Nicolson on a central finite-volume flux with zero-flux walls.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .coeffs import StableModel
from .density import MASS_TOL, Density, Grid, quantile
from .errors import BoundaryMassExceeded, BoundaryTooClose, GridMismatch, MassDriftExceeded, NonFiniteValue
from .linfp import DensityPath, QuantileCurve, _Recorder, _save_stride, _steps, clip_negative, mollified_dirac
from .nonlinear import NonlinearSolution, PicardConfig, solve_nonlinear

log = logging.getLogger(__name__)

SCHEME = "strang[drift: cn-central, implicit-upwind above Courant 1 | spectral-fractional]"
SEAM_TOL = 1e-8
PAD_FACTOR = 8
FIXED_POINT_TOL = 1e-13
COURANT_SWITCH = 1.0


@dataclass(frozen=True, eq=False)
class SpectralWorkspace:
    """Periodic extension of a scenario box with the multiplier |k|^alpha_s."""

    box: Grid
    alpha_s: float
    grid: Grid
    offset: int
    k: np.ndarray
    multiplier: np.ndarray

    @classmethod
    def build(cls, box: Grid, alpha_s: float, pad_factor: float = PAD_FACTOR) -> SpectralWorkspace:
        if not 1.0 < alpha_s <= 2.0:
            raise ValueError(f"stability index must lie in (1, 2], got {alpha_s}")
        n = 1 << math.ceil(math.log2(pad_factor * box.n))
        offset = (n - box.n) // 2
        x0 = box.x_min - offset * box.dx
        grid = Grid(x0, x0 + n * box.dx, n)
        k = 2 * math.pi * np.fft.rfftfreq(n, d=box.dx)
        mult = np.abs(k) ** alpha_s
        k.flags.writeable = False
        mult.flags.writeable = False
        return cls(box, alpha_s, grid, offset, k, mult)

    @property
    def n(self) -> int:
        return self.grid.n

    def embed(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        out[self.offset : self.offset + self.box.n] = values
        return out

    def restrict(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.offset : self.offset + self.box.n]

    def to_workspace(self, u: Density) -> Density:
        if u.grid == self.grid:
            return u
        if u.grid != self.box:
            raise GridMismatch("density lives neither on the scenario box nor on the workspace")
        return Density(self.grid, self.embed(u.values), mass_tol=None)

    def seam_mass(self, values: np.ndarray) -> float:
        """Largest cell mass on either side of the periodic seam."""
        return float(max(abs(values[0]), abs(values[-1])) * self.grid.dx)


def _check_seam(ws: SpectralWorkspace, values: np.ndarray, t: float | None = None) -> None:
    m = ws.seam_mass(values)
    if m > SEAM_TOL:
        when = "" if t is None else f" at t={t:.4g}"
        raise BoundaryMassExceeded(f"mass {m:.3e} at the periodic seam{when}; enlarge the box")


def fractional_apply(ws: SpectralWorkspace, a_field: Callable | float, u: Density) -> np.ndarray:
    """-|D|^alpha_s [a u] on the workspace grid (mass-neutral: the k = 0 mode is zero)."""
    u = ws.to_workspace(u)
    _check_seam(ws, u.values)
    a = a_field(ws.grid.nodes) if callable(a_field) else float(a_field)
    return np.fft.irfft(-ws.multiplier * np.fft.rfft(a * u.values), n=ws.n)


# --------------------------------------------------------------------------- steps


class _FractionalStep:
    def __init__(self, ws: SpectralWorkspace, model: StableModel, dt: float):
        self.ws = ws
        self.dt = dt
        if model.a_constant is not None:
            self.a = None
            self.decay = np.exp(-dt * model.a_constant * ws.multiplier)
        else:
            self.a = np.asarray(model.a_values(ws.grid.nodes), dtype=float)
            lo, hi = float(self.a.min()), float(self.a.max())
            self.a_bar = 0.5 * (lo + hi)
            self.da = self.a - self.a_bar
            h = 0.5 * dt
            self.h = h
            self.precond = 1.0 / (1.0 + h * self.a_bar * ws.multiplier)
        self.iterations = 0

    def __call__(self, u: np.ndarray) -> np.ndarray:
        n = self.ws.n
        if self.a is None:
            return np.fft.irfft(self.decay * np.fft.rfft(u), n=n)
        # Crank-Nicolson: (I + h L) v = (I - h L) u with L w = |D|^alpha [a w]
        mult, h = self.ws.multiplier, self.h
        rhs = np.fft.rfft(u) - h * mult * np.fft.rfft(self.a * u)
        v = np.fft.irfft(rhs * self.precond, n=n)
        for _ in range(200):
            v_new = np.fft.irfft((rhs - h * mult * np.fft.rfft(self.da * v)) * self.precond, n=n)
            self.iterations += 1
            if np.max(np.abs(v_new - v)) <= FIXED_POINT_TOL * max(1.0, np.max(np.abs(v_new))):
                return v_new
            v = v_new
        log.warning("fractional fixed-point iteration did not reach tolerance")
        return v


def _flux_ops(wl: np.ndarray, wr: np.ndarray, dx: float):
    """Tridiagonal generator of -d/dx F for face fluxes F = wl u_left + wr u_right, zero flux at the walls."""
    lower = wl / dx
    upper = -wr / dx
    diag = np.zeros(len(wl) + 1)
    diag[:-1] -= wl / dx
    diag[1:] += wr / dx
    return lower, diag, upper


class _DriftStep:
    """One step of length h for the drift term.

    Faces whose Courant number |b| h / dx is at most COURANT_SWITCH use the
    central flux with Crank-Nicolson (second order); faster faces, which only
    occur in the far tails of the workspace, use the upwind flux with implicit
    Euler, which keeps their outflow cells from changing sign.
    """

    def __init__(self, model: StableModel, omega, grid: Grid, h: float):
        self.model = model
        self.omega = omega
        self.grid = grid
        self.h = h
        self._key = None
        self._ops = None
        self.zero = False
        self.upwind_faces = 0

    def ops(self, t: float):
        w = self.omega(t)
        key = (t if self.model.time_dependent else None, None if self.model.kappa == 0 else w)
        if self._ops is None or key != self._key:
            b = np.asarray(self.model.b(t, self.grid.edges[1:-1], w), dtype=float)
            if not np.all(np.isfinite(b)):
                raise NonFiniteValue(f"non-finite drift at t={t:.4g}")
            self.zero = not np.any(b)
            dx, h = self.grid.dx, self.h
            fast = np.abs(b) * h / dx > COURANT_SWITCH
            self.upwind_faces = int(fast.sum())
            central = np.where(fast, 0.0, 0.5 * b)
            # explicit half of Crank-Nicolson on the central faces
            el, ed, eu = _flux_ops(central, central, dx)
            # implicit side: the other Crank-Nicolson half plus implicit upwind faces
            il, id_, iu = _flux_ops(0.5 * central + np.where(fast, np.maximum(b, 0.0), 0.0),
                                    0.5 * central + np.where(fast, np.minimum(b, 0.0), 0.0), dx)
            ab = np.zeros((3, self.grid.n))
            ab[0, 1:] = -h * iu
            ab[1] = 1.0 - h * id_
            ab[2, :-1] = -h * il
            self._ops = (0.5 * h * el, 0.5 * h * ed, 0.5 * h * eu, ab)
            self._key = key
        return self._ops

    def __call__(self, u: np.ndarray, t: float) -> np.ndarray:
        lower, diag, upper, ab = self.ops(t)
        if self.zero:
            return u
        rhs = u + diag * u
        rhs[:-1] += upper * u[1:]
        rhs[1:] += lower * u[:-1]
        return solve_banded((1, 1), ab, rhs, check_finite=False)


# --------------------------------------------------------------------------- linear solve


def solve_stable_fp(
    model: StableModel,
    omega: QuantileCurve | Callable,
    u0: Density,
    T: float,
    dt: float,
    *,
    workspace: SpectralWorkspace | None = None,
    t0: float = 0.0,
    track: Sequence[float] = (),
    save_every: int | None = None,
    n_save: int = 200,
    mass_tol: float = MASS_TOL,
    meta: dict | None = None,
) -> DensityPath:
    """Evolve u0 (on the scenario box or the workspace) over [t0, t0 + T].

    The path lives on the workspace grid.  Negative round-off is clipped and
    the clipped mass recorded per step; the seam guard raises
    BoundaryMassExceeded when the periodic extension becomes visible.
    """
    ws = workspace or SpectralWorkspace.build(u0.grid, model.alpha_s)
    if abs(ws.alpha_s - model.alpha_s) > 0:
        raise ValueError("workspace built for a different stability index")
    u0 = ws.to_workspace(u0)
    grid = ws.grid
    n_steps, dt = _steps(T, dt)
    frac = _FractionalStep(ws, model, dt)
    drift = _DriftStep(model, omega, grid, 0.5 * dt)
    rec = _Recorder(grid, n_steps, _save_stride(n_steps, save_every, n_save), track, t0, dt)
    u = np.array(u0.values, dtype=float)
    _check_seam(ws, u, t0)
    rec.record(0, u, float(u.min()), 0.0)
    m0 = rec.mass[0]
    total_clipped = 0.0
    for k in range(n_steps):
        t = t0 + k * dt
        tm = t + 0.5 * dt
        u = drift(u, tm)
        u = frac(u)
        u = drift(u, tm)
        if not np.all(np.isfinite(u)):
            raise NonFiniteValue(f"non-finite density at t={t + dt:.6g}")
        raw_min, clipped = clip_negative(u)
        total_clipped += clipped * grid.dx
        rec.record(k + 1, u, raw_min, clipped * grid.dx)
        if abs(rec.mass[k + 1] - m0) > mass_tol:
            raise MassDriftExceeded(f"mass drifted by {rec.mass[k + 1] - m0:.3e} at t={t + dt:.6g}")
        _check_seam(ws, u, t + dt)
    if total_clipped > 0:
        log.info("clipped %.3e of negative mass over %d steps", total_clipped, n_steps)
    info = {
        "scheme": SCHEME,
        "dx": grid.dx,
        "dt": dt,
        "T": T,
        "t0": t0,
        "alpha_s": model.alpha_s,
        "mass_drift": float(np.max(np.abs(rec.mass - m0))),
        "min_value": float(rec.min_value.min()),
        "clipped_mass": total_clipped,
        "box": {"x_min": ws.box.x_min, "x_max": ws.box.x_max, "n": ws.box.n},
        "workspace_n": ws.n,
        "fractional_iterations": frac.iterations,
        "model": model.name,
    }
    info.update(meta or {})
    return rec.path(info)


def restrict_to_box(ws: SpectralWorkspace, u: Density) -> Density:
    """Scenario-box part of a workspace density (mass outside the box is dropped)."""
    return Density(ws.box, ws.restrict(u.values), mass_tol=None)


def restrict_path(ws: SpectralWorkspace, path: DensityPath) -> DensityPath:
    """The same path with slices cut to the scenario box (for writing; mass diagnostics stay workspace-wide)."""
    sl = slice(ws.offset, ws.offset + ws.box.n)
    meta = dict(path.meta, restricted_to_box=True)
    return replace(path, grid=ws.box, slices=np.ascontiguousarray(path.slices[:, sl]), meta=meta)


# --------------------------------------------------------------------------- nonlinear


def stable_dirac(ws: SpectralWorkspace, xi: float, width_cells: float = 2.0) -> Density:
    """Mollified point mass on the workspace grid; xi must lie inside the scenario box."""
    if not ws.box.x_min < xi < ws.box.x_max:
        raise BoundaryTooClose(f"xi={xi} outside the scenario box")
    return mollified_dirac(ws.grid, xi, width_cells)


def solve_stable_nonlinear(
    model: StableModel,
    start: Density | float,
    alpha,
    T: float,
    dt: float,
    cfg: PicardConfig | None = None,
    *,
    box: Grid | None = None,
    width_cells: float = 2.0,
    omega0: QuantileCurve | float | None = None,
) -> NonlinearSolution:
    """Picard fixed point with the stable-like linear solver inside.

    ``start`` is a density (on a scenario box or its workspace) or a point xi,
    in which case ``box`` is required and the start is the mollified point mass.
    """
    if isinstance(start, Density):
        ws = SpectralWorkspace.build(box or start.grid, model.alpha_s)
        u0 = ws.to_workspace(start)
        xi = None
    else:
        if box is None:
            raise ValueError("a point start needs the scenario box")
        ws = SpectralWorkspace.build(box, model.alpha_s)
        xi = float(start)
        u0 = stable_dirac(ws, xi, width_cells)
    solver = partial(solve_stable_fp, workspace=ws)
    sol = solve_nonlinear(model, u0, alpha, T, dt, cfg, omega0=omega0, solver=solver)
    sol.path.meta.update(alpha_s=model.alpha_s)
    if xi is not None:
        sol.path.meta.update(dirac_start=True, xi=xi, mollifier_sd=width_cells * ws.grid.dx)
    return sol
