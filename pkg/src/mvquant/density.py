"""Gridded densities on truncated boxes and their quantiles.

Densities live on cell-centred tensor grids (d = 1 or 2).  The CDF is the
prefix sum of cell masses and is interpolated linearly inside a cell, so the
quantile of a piecewise-constant density is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    CertificateUnobtainable,
    CertificateViolated,
    DegenerateDensity,
    GridMismatch,
    InvalidDensity,
    LevelOutOfRange,
    OrderOutOfRange,
)

MASS_TOL = 1e-8
PLATEAU_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred axis; node j sits at ``x_min + (j + 1/2) dx``."""

    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if self.n < 8:
            raise ValueError(f"grid needs at least 8 cells, got {self.n}")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @classmethod
    def from_spacing(cls, x_min: float, x_max: float, dx: float) -> Grid:
        n = int(round((x_max - x_min) / dx))
        return cls(float(x_min), float(x_min + n * dx), n)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.x_min + (np.arange(self.n) + 0.5) * self.dx
        x.flags.writeable = False
        return x

    @cached_property
    def edges(self) -> np.ndarray:
        e = self.x_min + np.arange(self.n + 1) * self.dx
        e.flags.writeable = False
        return e

    def refine(self, factor: int = 2) -> Grid:
        return Grid(self.x_min, self.x_max, self.n * factor)


class Density:
    """Non-negative gridded probability density with unit mass.

    ``grid`` is a single :class:`Grid` (d = 1) or a pair of grids (d = 2,
    values indexed ``[i, j]`` for ``(x_i, y_j)``).  Values are copied and
    frozen; a Density never changes after construction.
    """

    __slots__ = ("axes", "values", "__weakref__")

    def __init__(self, grid: Grid | Sequence[Grid], values, *, mass_tol: float | None = MASS_TOL):
        axes = (grid,) if isinstance(grid, Grid) else tuple(grid)
        if len(axes) not in (1, 2):
            raise ValueError("only d = 1 and d = 2 grids are supported")
        vals = np.array(values, dtype=float)
        if vals.shape != tuple(g.n for g in axes):
            raise InvalidDensity(f"values shape {vals.shape} does not match grid {tuple(g.n for g in axes)}")
        if not np.all(np.isfinite(vals)):
            raise InvalidDensity("density has non-finite values")
        if np.any(vals < 0):
            raise InvalidDensity(f"density has negative values (min {vals.min():.3e})")
        vals.flags.writeable = False
        self.axes = axes
        self.values = vals
        if mass_tol is not None and abs(self.mass - 1.0) > mass_tol:
            raise InvalidDensity(f"mass {self.mass!r} differs from 1 by more than {mass_tol}")

    @classmethod
    def from_function(cls, grid: Grid | Sequence[Grid], f: Callable, *, normalize: bool = True) -> Density:
        axes = (grid,) if isinstance(grid, Grid) else tuple(grid)
        if len(axes) == 1:
            vals = np.asarray(f(axes[0].nodes), dtype=float)
        else:
            X, Y = np.meshgrid(axes[0].nodes, axes[1].nodes, indexing="ij")
            vals = np.asarray(f(X, Y), dtype=float)
        if normalize:
            vals = vals / (vals.sum() * np.prod([g.dx for g in axes]))
        return cls(axes, vals)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def grid(self) -> Grid:
        if self.dim != 1:
            raise AttributeError("grid is only defined for d = 1; use axes")
        return self.axes[0]

    @property
    def cell_volume(self) -> float:
        return float(np.prod([g.dx for g in self.axes]))

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def marginal(self, axis: int) -> Density:
        if self.dim == 1:
            return self
        other = 1 - axis
        vals = self.values.sum(axis=other) * self.axes[other].dx
        return Density(self.axes[axis], vals, mass_tol=None)

    def shifted(self, cells: int) -> Density:
        """Translate a 1-d density by a whole number of cells (mass pushed off the grid is dropped)."""
        vals = np.zeros_like(self.values)
        if cells >= 0:
            vals[cells:] = self.values[: self.grid.n - cells]
        else:
            vals[:cells] = self.values[-cells:]
        return Density(self.grid, vals, mass_tol=None)

    def __repr__(self):
        return f"Density(axes={self.axes}, mass={self.mass:.12g})"


@dataclass(frozen=True)
class QuantileLevels:
    alpha: tuple[float, ...]

    def __post_init__(self):
        alpha = tuple(float(a) for a in np.atleast_1d(self.alpha))
        for a in alpha:
            if not 0.0 < a < 1.0:
                raise LevelOutOfRange(f"quantile level {a} not in (0, 1)")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def of(cls, alpha) -> QuantileLevels:
        return alpha if isinstance(alpha, QuantileLevels) else cls(tuple(np.atleast_1d(alpha)))

    @property
    def dim(self) -> int:
        return len(self.alpha)

    def __iter__(self):
        return iter(self.alpha)


@dataclass(frozen=True)
class LocalizationCertificate:
    """Half-width K, density floor delta and tail bound eps of a localization box."""

    K: float
    delta: float
    eps: float
    alpha: QuantileLevels | None = None
    box_clipped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.K > 0:
            raise ValueError("K must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.alpha is not None:
            _check_eps(self.eps, self.alpha)


def _check_eps(eps: float, alpha: QuantileLevels) -> None:
    bound = min(min(a, 1 - a) for a in alpha)
    if not eps < bound:
        raise ValueError(f"eps={eps} must be below min(alpha, 1 - alpha) = {bound}")


# --------------------------------------------------------------------------- CDF and quantiles


def cdf(u: Density, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative mass at the cell edges of ``axis``: returns ``(edges, C)`` with ``C[0] = 0``."""
    m = u.marginal(axis)
    C = np.concatenate(([0.0], np.cumsum(m.values) * m.grid.dx))
    return m.grid.edges, C


def cdf_at(u: Density, x: float, axis: int = 0) -> float:
    """Linearly interpolated CDF at position ``x``."""
    edges, C = cdf(u, axis)
    return float(np.interp(x, edges, C))


def _quantile_from_cdf(edges: np.ndarray, C: np.ndarray, alpha: float, strict: bool, plateau_tol: float) -> float:
    n = len(C) - 1
    k = int(np.searchsorted(C, alpha, side="left"))
    if k > n:
        raise DegenerateDensity(f"total mass {C[-1]!r} does not reach level {alpha}")
    lo = int(np.searchsorted(C, alpha - plateau_tol, side="left"))
    hi = int(np.searchsorted(C, alpha + plateau_tol, side="right")) - 1
    if hi - lo >= 1:
        # CDF stays within plateau_tol of alpha over at least one whole cell
        if strict:
            raise DegenerateDensity(
                f"CDF is flat at level {alpha} on [{edges[lo]:.6g}, {edges[hi]:.6g}]; quantile not unique"
            )
        return float(edges[lo])
    j = k - 1
    mass = C[k] - C[j]
    return float(edges[j] + (alpha - C[j]) / mass * (edges[k] - edges[j]))


def quantile(u: Density, alpha: float, *, axis: int = 0, strict: bool = True, plateau_tol: float = PLATEAU_TOL) -> float:
    """Position Q with CDF(Q) = alpha, for a 1-d density or a marginal of a 2-d one.

    With ``strict=False`` a flat CDF at level alpha resolves to the left end of
    the plateau instead of raising :class:`DegenerateDensity`.
    """
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise LevelOutOfRange(f"quantile level {alpha} not in (0, 1)")
    edges, C = cdf(u, axis)
    return _quantile_from_cdf(edges, C, alpha, strict, plateau_tol)


def quantile_vector(u: Density, alpha, *, strict: bool = True) -> np.ndarray:
    """Per-coordinate quantiles: coordinate j solves mass{x_j <= Q_j} = alpha_j."""
    levels = QuantileLevels.of(alpha)
    if levels.dim != u.dim:
        raise LevelOutOfRange(f"need {u.dim} levels, got {levels.dim}")
    return np.array([quantile(u, a, axis=j, strict=strict) for j, a in enumerate(levels)])


def quantiles_from_values(values: np.ndarray, grid: Grid, alpha: float) -> float:
    """Quantile straight from a raw 1-d value array (used inside solver loops)."""
    C = np.empty(grid.n + 1)
    C[0] = 0.0
    np.cumsum(values, out=C[1:])
    C[1:] *= grid.dx
    return _quantile_from_cdf(grid.edges, C, alpha, False, PLATEAU_TOL)


# --------------------------------------------------------------------------- norms


def _same_axes(u: Density, v: Density) -> None:
    if u.axes != v.axes:
        raise GridMismatch(f"densities live on different grids: {u.axes} vs {v.axes}")


def l1_distance(u: Density, v: Density) -> float:
    _same_axes(u, v)
    return float(np.abs(u.values - v.values).sum() * u.cell_volume)


def sobolev_norm(u: Density, k: int) -> float:
    """Sum of L1 norms of u and all its partial derivatives up to order k (central differences)."""
    if k not in (0, 1, 2):
        raise OrderOutOfRange(f"Sobolev order must be 0, 1 or 2, got {k}")
    vol = u.cell_volume
    dxs = [g.dx for g in u.axes]
    total = np.abs(u.values).sum() * vol
    if k == 0:
        return float(total)
    first = [np.gradient(u.values, dxs[j], axis=j) for j in range(u.dim)]
    total += sum(np.abs(f).sum() for f in first) * vol
    if k == 2:
        for i in range(u.dim):
            for j in range(i, u.dim):
                total += np.abs(np.gradient(first[i], dxs[j], axis=j)).sum() * vol
    return float(total)


# --------------------------------------------------------------------------- localization


def _box_mask(u: Density, half_width: float, center=None) -> np.ndarray:
    center = np.zeros(u.dim) if center is None else np.atleast_1d(center)
    masks = [np.abs(g.nodes - c) <= half_width for g, c in zip(u.axes, center)]
    if u.dim == 1:
        return masks[0]
    return np.logical_and.outer(masks[0], masks[1])


def _box_clipped(u: Density, half_width: float, center=None) -> bool:
    center = np.zeros(u.dim) if center is None else np.atleast_1d(center)
    return any(c - half_width < g.x_min or c + half_width > g.x_max for g, c in zip(u.axes, center))


def tail_mass(u: Density, K: float, center=None) -> float:
    """Mass outside the box of half-width K (union bound over coordinates for d = 2)."""
    center = np.zeros(u.dim) if center is None else np.atleast_1d(center)
    total = 0.0
    for j in range(u.dim):
        edges, C = cdf(u, j)
        c = center[j]
        total += np.interp(c - K, edges, C) + (C[-1] - np.interp(c + K, edges, C))
    return float(total)


def tail_radius(u: Density, eps: float, center=None) -> float:
    """Smallest K (to bisection precision) with tail_mass(u, K) <= eps."""
    center = np.zeros(u.dim) if center is None else np.atleast_1d(center)
    hi = max(max(abs(g.x_min - c), abs(g.x_max - c)) for g, c in zip(u.axes, center))
    lo = 0.0
    if tail_mass(u, hi, center) > eps:
        raise CertificateUnobtainable(f"tail mass exceeds eps={eps} even on the whole grid")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if tail_mass(u, mid, center) <= eps:
            hi = mid
        else:
            lo = mid
    return hi


def localization_scan(densities: Iterable[Density], alpha, eps: float = 1e-3) -> LocalizationCertificate:
    """Certificate (K, delta, eps) shared by a family of densities.

    K bounds the tails by eps and confines every quantile; delta is the minimum
    density over the box of half-width 2K across the whole family.
    """
    levels = QuantileLevels.of(alpha)
    _check_eps(eps, levels)
    densities = list(densities)
    if not densities:
        raise ValueError("need at least one density")
    K = 0.0
    for u in densities:
        K = max(K, tail_radius(u, eps))
        K = max(K, float(np.max(np.abs(quantile_vector(u, levels)))))
    delta = np.inf
    clipped = False
    for u in densities:
        mask = _box_mask(u, 2 * K)
        clipped |= _box_clipped(u, 2 * K)
        delta = min(delta, float(u.values[mask].min()))
    if not delta > 0:
        raise CertificateUnobtainable(f"density vanishes on the box of half-width 2K = {2 * K:.4g}")
    return LocalizationCertificate(K=K, delta=delta, eps=eps, alpha=levels, box_clipped=clipped)


def check_certificate(u: Density, alpha, cert: LocalizationCertificate) -> None:
    levels = QuantileLevels.of(alpha)
    mask = _box_mask(u, 2 * cert.K)
    low = float(u.values[mask].min())
    if low < cert.delta:
        raise CertificateViolated(f"density drops to {low:.4e} < delta={cert.delta:.4e} on the 2K box")
    q = quantile_vector(u, levels)
    if np.any(np.abs(q) > cert.K):
        raise CertificateViolated(f"quantile {q} outside the box of half-width K={cert.K}")


@dataclass(frozen=True)
class SensitivityReport:
    lhs: np.ndarray
    rhs: float
    holds: bool
    holds_strict: bool
    allowance: float


def quantile_sensitivity_bound(
    u1: Density,
    u2: Density,
    alpha,
    cert: LocalizationCertificate,
    *,
    slack: float = 1e-9,
    allowance: float | None = None,
) -> SensitivityReport:
    """Check |Q(u2) - Q(u1)| <= ||u1 - u2||_1 / (delta K^(d-1)) coordinatewise.

    ``allowance`` (default: the grid spacing) absorbs quantile interpolation
    error; ``holds_strict`` reports the check without it.
    """
    levels = QuantileLevels.of(alpha)
    check_certificate(u1, levels, cert)
    check_certificate(u2, levels, cert)
    lhs = np.abs(quantile_vector(u2, levels) - quantile_vector(u1, levels))
    rhs = l1_distance(u1, u2) / (cert.delta * cert.K ** (u1.dim - 1))
    if allowance is None:
        allowance = max(g.dx for g in u1.axes)
    bound = rhs * (1 + slack)
    return SensitivityReport(
        lhs=lhs,
        rhs=rhs,
        holds=bool(np.all(lhs <= bound + allowance)),
        holds_strict=bool(np.all(lhs <= bound + 1e-15)),
        allowance=allowance,
    )


# --------------------------------------------------------------------------- CSV


def _grid_header(axes: Sequence[Grid]) -> str:
    parts = [f"axis{j}={g.x_min!r},{g.x_max!r},{g.n}" for j, g in enumerate(axes)]
    return "# grid " + " ".join(parts)


def save_csv(u: Density, path: str | Path) -> None:
    """Write ``x[, y], value`` rows with 17 significant digits (bit-exact round trip)."""
    path = Path(path)
    lines = [_grid_header(u.axes)]
    if u.dim == 1:
        lines.append("x,value")
        lines += [f"{x:.17g},{v:.17g}" for x, v in zip(u.grid.nodes, u.values)]
    else:
        lines.append("x,y,value")
        gx, gy = u.axes
        for i, x in enumerate(gx.nodes):
            lines += [f"{x:.17g},{y:.17g},{v:.17g}" for y, v in zip(gy.nodes, u.values[i])]
    path.write_text("\n".join(lines) + "\n")


def load_csv(path: str | Path, *, mass_tol: float | None = MASS_TOL) -> Density:
    text = Path(path).read_text().splitlines()
    if not text[0].startswith("# grid "):
        raise InvalidDensity(f"{path}: missing grid header")
    axes = []
    for part in text[0][len("# grid "):].split():
        _, spec = part.split("=")
        lo, hi, n = spec.split(",")
        axes.append(Grid(float(lo), float(hi), int(n)))
    rows = np.array([[float(c) for c in line.split(",")] for line in text[2:] if line])
    vals = rows[:, -1].reshape(tuple(g.n for g in axes))
    return Density(axes, vals, mass_tol=mass_tol)
