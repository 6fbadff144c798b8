"""Fixed point of the quantile map omega -> Q_alpha(u[omega]) for the nonlinear equation.

``u[omega]`` is the linear Fokker-Planck solution with coefficients evaluated
along the curve omega.  Picard iteration is run on a time window; when the
measured contraction ratio does not drop below one the window is split and
the windows are solved one after another, each starting from the terminal
density of the previous one.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .coeffs import CoefficientField
from .density import Density, Grid, QuantileLevels, localization_scan, quantile
from .errors import CertificateUnobtainable, CurveEscapedBox, NoConvergence
from .linfp import (
    DensityPath,
    QuantileCurve,
    check_margin,
    concat_paths,
    mollified_dirac,
    solve_linear_fp,
    write_path,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PicardConfig:
    tol: float = 1e-6
    max_iter: int = 50
    split_factor: int = 2
    max_splits: int = 6
    box_K: float | None = None
    relaxation: float = 1.0
    ratio_after: int = 3
    certificate_eps: float = 1e-3
    n_save: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.split_factor < 2:
            raise ValueError("split_factor must be at least 2")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class NonlinearSolution:
    """omega* with the density path u* = u[omega*]; residual = sup_t |Q_alpha(u*_t) - omega*_t|."""

    omega: QuantileCurve
    path: DensityPath
    residual: float
    alpha: float
    trace: list
    windows: list
    splits: int
    iterations: int
    certificates: list = field(default_factory=list)

    @property
    def trace_flat(self) -> list[float]:
        return [d for w in self.trace for d in w["diffs"]]

    def image(self) -> QuantileCurve:
        """Quantile curve of u*, i.e. one more Picard image of omega*."""
        return self.path.quantile_curve(self.alpha)


def _level(alpha) -> float:
    levels = QuantileLevels.of(alpha)
    if len(levels.alpha) != 1:
        raise ValueError("the density solver is one-dimensional: give a single quantile level")
    return levels.alpha[0]


# --------------------------------------------------------------------------- Picard map


def picard_image(
    model: CoefficientField,
    omega: QuantileCurve,
    u0: Density,
    alpha,
    T: float,
    dt: float,
    *,
    t0: float = 0.0,
    box_K: float | None = None,
    n_save: int = 100,
    solver: Callable = solve_linear_fp,
) -> tuple[QuantileCurve, DensityPath]:
    """Solve along omega and return (Q_alpha(u_t) on the solver nodes, the path).

    ``solver`` is the inner linear solve; it must accept the keywords of
    :func:`solve_linear_fp` used here (t0, track, n_save).
    """
    a = _level(alpha)
    path = solver(model, omega, u0, T, dt, t0=t0, track=(a,), n_save=n_save)
    q = path.quantiles[a]
    if box_K is not None and np.max(np.abs(q)) > box_K:
        k = int(np.argmax(np.abs(q)))
        raise CurveEscapedBox(f"quantile {q[k]:.4g} at t={path.times[k]:.4g} leaves the box |w| <= {box_K}")
    return QuantileCurve(path.times, q), path


def picard_step(model, omega, u0, alpha, T, dt, *, t0=0.0, box_K=None, solver=solve_linear_fp) -> QuantileCurve:
    """One application of the map omega -> Q_alpha(u[omega])."""
    return picard_image(model, omega, u0, alpha, T, dt, t0=t0, box_K=box_K, solver=solver)[0]


def _sup_diff(a: QuantileCurve, b: QuantileCurve) -> float:
    if a.times.shape == b.times.shape and np.array_equal(a.times, b.times):
        return float(np.max(np.abs(a.values - b.values)))
    return a.sup_distance(b)


def _iterate_window(model, u0, a, t0, L, dt, cfg, omega0, solver):
    """Picard iteration on [t0, t0 + L].  Returns (status, omega, path, diffs)."""
    omega = omega0
    diffs: list[float] = []
    for k in range(1, cfg.max_iter + 1):
        image, path = picard_image(model, omega, u0, a, L, dt, t0=t0, box_K=cfg.box_K, n_save=cfg.n_save,
                                   solver=solver)
        d = _sup_diff(image, omega)
        diffs.append(d)
        if d <= cfg.tol:
            # path = u[omega] and its quantiles are `image`: omega is self-consistent within d
            return "converged", omega, path, diffs
        if k >= cfg.ratio_after and len(diffs) >= 2 and diffs[-1] >= diffs[-2]:
            return "expanding", omega, path, diffs
        if cfg.relaxation < 1:
            image = QuantileCurve(image.times, (1 - cfg.relaxation) * omega(image.times)[:, None]
                                  + cfg.relaxation * image.values)
        omega = image
    return "max_iter", omega, path, diffs


def solve_nonlinear(
    model: CoefficientField,
    u0: Density,
    alpha,
    T: float,
    dt: float,
    cfg: PicardConfig | None = None,
    *,
    omega0: QuantileCurve | float | None = None,
    solver: Callable = solve_linear_fp,
) -> NonlinearSolution:
    """Fixed point omega* = Q_alpha(u[omega*]) on [0, T].

    The first iterate is the constant curve at Q_alpha(u0) unless ``omega0``
    (a curve or a constant) is given.  Windows are split by
    ``cfg.split_factor`` when successive sup-differences stop decreasing after
    ``cfg.ratio_after`` iterations or ``cfg.max_iter`` is reached.
    """
    cfg = cfg or PicardConfig()
    a = _level(alpha)
    n_total = max(1, math.ceil(T / dt - 1e-9))
    dt = T / n_total
    q0 = quantile(u0, a)
    L_steps = n_total
    start = 0
    u = u0
    splits = 0
    iterations = 0
    omegas, paths, trace, windows, certs = [], [], [], [], []
    while start < n_total:
        steps = min(L_steps, n_total - start)
        t0, L = start * dt, steps * dt
        if omega0 is None:
            init = QuantileCurve.constant(quantile(u, a), t0, t0 + L)
        elif isinstance(omega0, QuantileCurve):
            init = omega0.restricted(t0, t0 + L)
        else:
            init = QuantileCurve.constant(float(omega0) + quantile(u, a) - q0, t0, t0 + L)
        status, omega, path, diffs = _iterate_window(model, u, a, t0, L, dt, cfg, init, solver)
        iterations += len(diffs)
        trace.append({"window": (t0, t0 + L), "diffs": diffs, "status": status})
        if status != "converged":
            if splits >= cfg.max_splits or L_steps < cfg.split_factor:
                raise NoConvergence(
                    f"window [{t0:.4g}, {t0 + L:.4g}] {status} after {len(diffs)} iterations "
                    f"and {splits} splits (last diffs {diffs[-3:]})"
                )
            L_steps = max(1, L_steps // cfg.split_factor)
            splits += 1
            log.info("splitting: window length now %d steps (%.4g)", L_steps, L_steps * dt)
            continue
        omegas.append(omega)
        paths.append(path)
        windows.append((t0, t0 + L))
        certs.append(_window_certificate(path, a, cfg.certificate_eps))
        u = path.final
        start += steps
    omega_star = _join_curves(omegas)
    path_star = concat_paths(paths)
    residual = float(np.max(np.abs(path_star.quantiles[a] - omega_star(path_star.times))))
    path_star.meta.update(nonlinear=True, alpha=a, windows=windows)
    return NonlinearSolution(
        omega=omega_star,
        path=path_star,
        residual=residual,
        alpha=a,
        trace=trace,
        windows=windows,
        splits=splits,
        iterations=iterations,
        certificates=certs,
    )


def _join_curves(curves: list[QuantileCurve]) -> QuantileCurve:
    if len(curves) == 1:
        return curves[0]
    t = [curves[0].times] + [c.times[1:] for c in curves[1:]]
    v = [curves[0].values] + [c.values[1:] for c in curves[1:]]
    return QuantileCurve(np.concatenate(t), np.concatenate(v))


def _window_certificate(path: DensityPath, a: float, eps: float) -> dict:
    try:
        cert = localization_scan(path.densities(mass_tol=None), a, eps)
    except CertificateUnobtainable as exc:
        # expected for point-mass starts, whose early slices vanish away from xi
        log.debug("no localization certificate for window ending at %.4g: %s", path.T, exc)
        return {"error": str(exc)}
    return {"K": cert.K, "delta": cert.delta, "eps": cert.eps, "box_clipped": cert.box_clipped}


# --------------------------------------------------------------------------- Dirac starts


@dataclass(frozen=True, eq=False)
class DiracSolution:
    xi: float
    widths: tuple
    solutions: dict
    eta: dict
    pairwise_sup: float
    window: tuple[float, float]

    @property
    def base(self) -> NonlinearSolution:
        key = 2.0 if 2.0 in self.solutions else self.widths[0]
        return self.solutions[key]


def solve_nonlinear_dirac(
    model: CoefficientField,
    xi: float,
    alpha,
    T: float,
    dt: float,
    cfg: PicardConfig | None = None,
    *,
    grid: Grid,
    widths=(1.0, 2.0, 4.0),
    compare_window: tuple[float, float] | None = None,
    workers: int = 1,
) -> DiracSolution:
    """Nonlinear solves from mollified point masses of several widths (in cells).

    Reports eta_t = t^(-1/2) (omega*_t - xi) per width and the largest pairwise
    sup-difference of omega* over ``compare_window`` (default: all t > 0).
    """
    check_margin(grid, xi, model.m, T)
    widths = tuple(float(w) for w in widths)

    def run(w):
        return solve_nonlinear(model, mollified_dirac(grid, xi, w), alpha, T, dt, cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sols = dict(zip(widths, pool.map(run, widths)))
    else:
        sols = {w: run(w) for w in widths}
    lo, hi = compare_window or (0.0, T)
    eta = {}
    for w, s in sols.items():
        t = s.omega.times
        pos = t > 0
        eta[w] = QuantileCurve(t[pos], (s.omega.values[pos, 0] - xi) / np.sqrt(t[pos]))
    worst = 0.0
    for i, w1 in enumerate(widths):
        for w2 in widths[i + 1:]:
            c1, c2 = sols[w1].omega, sols[w2].omega
            t = c1.times[(c1.times >= lo - 1e-12) & (c1.times <= hi + 1e-12)]
            worst = max(worst, float(np.max(np.abs(c1(t) - c2(t)))))
    return DiracSolution(xi=xi, widths=widths, solutions=sols, eta=eta, pairwise_sup=worst, window=(lo, hi))


# --------------------------------------------------------------------------- contraction


@dataclass(frozen=True)
class ContractionReport:
    T: float
    h: float
    ratio_T: float
    ratio_quarter: float
    times: np.ndarray
    difference: np.ndarray

    def ratio_at(self, t: float) -> float:
        """sup_{s <= t} |image difference| / h."""
        m = self.times <= t + 1e-12
        return float(np.max(self.difference[m]) / self.h)

    def to_dict(self) -> dict:
        return {"T": self.T, "h": self.h, "ratio_T": self.ratio_T, "ratio_quarter": self.ratio_quarter}


def contraction_diagnostic(
    model: CoefficientField,
    u0: Density,
    alpha,
    T: float,
    dt: float,
    *,
    h: float = 0.01,
    omega: QuantileCurve | None = None,
    workers: int = 1,
    solver: Callable = solve_linear_fp,
) -> ContractionReport:
    """Images of omega and omega + h under the quantile map, compared at horizons T and T/4.

    The linear solve is causal, so the image on [0, T/4] is the restriction of
    the image on [0, T]; one pair of solves serves both horizons.
    """
    omega = omega or QuantileCurve.constant(quantile(u0, _level(alpha)), 0.0, T)
    curves = (omega, omega.shifted(h))

    def run(c):
        return picard_step(model, c, u0, alpha, T, dt, solver=solver)

    if workers > 1:
        with ThreadPoolExecutor(2) as pool:
            i1, i2 = pool.map(run, curves)
    else:
        i1, i2 = map(run, curves)
    diff = np.abs(i1.values[:, 0] - i2.values[:, 0])
    rep = ContractionReport(T=T, h=h, ratio_T=0.0, ratio_quarter=0.0, times=i1.times, difference=diff)
    return ContractionReport(T=T, h=h, ratio_T=rep.ratio_at(T), ratio_quarter=rep.ratio_at(T / 4),
                             times=i1.times, difference=diff)


# --------------------------------------------------------------------------- export


def write_solution(sol: NonlinearSolution, out_dir: str | Path) -> list[Path]:
    """omega* CSV, iteration trace JSON and the density path (CSV slices + manifest)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve = out / "omega.csv"
    with open(curve, "w") as fh:
        fh.write("t,omega_1\n")
        for t, w in zip(sol.omega.times, sol.omega.values[:, 0]):
            fh.write(f"{t:.17g},{w:.17g}\n")
    trace = out / "trace.json"
    payload = {
        "alpha": sol.alpha,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "splits": sol.splits,
        "windows": sol.windows,
        "trace": sol.trace,
        "certificates": sol.certificates,
    }
    trace.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    files = write_path(sol.path, out / "path")
    return [curve, trace, *files]
