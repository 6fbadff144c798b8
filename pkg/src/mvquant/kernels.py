"""Reference kernels (Gaussian, symmetric stable) and certification of kernel bounds.

Paths started from a mollified point mass are compared with reference kernels
at the elapsed time ``t + w**2``, where ``w`` is the mollifier standard
deviation: the mollified start is itself the unit heat kernel at time ``w**2``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from .density import Density, LocalizationCertificate, localization_scan, quantile, tail_radius
from .errors import GridMismatch, IndexOutOfRange, NoEnvelopeFound, NonPositiveSigma, NonPositiveTime
from .linfp import DensityPath

DEFAULT_T_FLOOR = 0.01
DEFAULT_C = 3.0
CERT_MARGIN = 0.02
STABLE_TAIL_TOL = 1e-9
MAX_WORKSPACE = 1 << 22


# --------------------------------------------------------------------------- reference kernels


def gaussian_kernel(sigma: float, t: float, x, d: int = 1) -> np.ndarray:
    """(2 pi t sigma^2)^(-d/2) exp(-|x|^2 / (2 t sigma^2)); for d > 1 the last axis of x holds coordinates."""
    if not t > 0:
        raise NonPositiveTime(f"t must be positive, got {t}")
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=float)
    r2 = x**2 if d == 1 else np.sum(x**2, axis=-1)
    var = t * sigma * sigma
    return np.exp(-r2 / (2 * var)) / (2 * math.pi * var) ** (d / 2)


def _check_index(alpha_s: float) -> None:
    if not 1.0 < alpha_s <= 2.0:
        raise IndexOutOfRange(f"stability index must lie in (1, 2], got {alpha_s}")


def _next_pow2(n: float) -> int:
    return 1 << max(3, math.ceil(math.log2(max(n, 8))))


def _spacing(x: np.ndarray) -> float | None:
    if x.size < 2:
        return None
    h = np.diff(x)
    if np.any(h <= 0) or np.ptp(h) > 1e-9 * h.mean():
        return None
    return float(h.mean())


def stable_density(alpha_s: float, a: float, t: float, x) -> np.ndarray:
    """Density of the symmetric stable law with characteristic function exp(-t a |k|^alpha_s).

    Evaluated by FFT on a periodic workspace that contains ``x`` (an evenly
    spaced, increasing grid) and is wide enough that periodic images of the
    tails stay below about 1e-9 relative to the peak.  Arbitrary point sets are
    handled by interpolating a finely resolved profile.
    """
    _check_index(alpha_s)
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    if not t > 0:
        raise NonPositiveTime(f"t must be positive, got {t}")
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    h = _spacing(flat)
    if h is None or _workspace_size(alpha_s, t * a, h, flat.size)[1] > MAX_WORKSPACE:
        return _stable_profile_eval(alpha_s, t * a, flat).reshape(x.shape)
    return _stable_on_lattice(alpha_s, t * a, float(flat[0]), h, flat.size).reshape(x.shape)


def _workspace_size(alpha_s: float, ta: float, h: float, n: int) -> tuple[int, int]:
    """(refinement factor, FFT length) for a lattice of n points with spacing h."""
    scale = ta ** (1.0 / alpha_s)
    # resolve the multiplier until exp(-ta k_max^alpha) is negligible
    k_need = (40.0 / ta) ** (1.0 / alpha_s)
    refine = max(1, math.ceil(k_need * h / math.pi))
    span = (n - 1) * h
    if alpha_s == 2.0:
        pad = 40.0 * scale
    else:
        pad = scale * STABLE_TAIL_TOL ** (-1.0 / (1.0 + alpha_s))
    return refine, _next_pow2((2 * span + 2 * pad) * refine / h)


def _stable_on_lattice(alpha_s: float, ta: float, x0: float, h: float, n: int) -> np.ndarray:
    refine, N = _workspace_size(alpha_s, ta, h, n)
    hw = h / refine
    k = 2 * math.pi * np.fft.fftfreq(N, d=hw)
    phi = np.exp(-ta * np.abs(k) ** alpha_s - 1j * k * x0)
    vals = np.fft.fft(phi).real / (N * hw)
    return vals[: (n - 1) * refine + 1 : refine].copy()


PROFILE_END = 400.0


@lru_cache(maxsize=8)
def _unit_profile(alpha_s: float) -> tuple[CubicSpline, float]:
    """Cubic spline of S(1, y), y >= 0, used to evaluate scattered points."""
    h = 0.01
    y = np.arange(0.0, PROFILE_END + h, h)
    vals = _stable_on_lattice(alpha_s, 1.0, 0.0, h, y.size)
    return CubicSpline(y, vals), float(vals[-1])


def _stable_profile_eval(alpha_s: float, ta: float, x: np.ndarray) -> np.ndarray:
    s = ta ** (1.0 / alpha_s)
    spline, end = _unit_profile(alpha_s)
    z = np.abs(np.asarray(x, dtype=float)) / s
    far = z > PROFILE_END
    out = spline(np.minimum(z, PROFILE_END))
    if np.any(far):
        # power-law tail continued from the profile end
        out[far] = end * (PROFILE_END / z[far]) ** (1 + alpha_s) if alpha_s < 2 else 0.0
    return out / s


# --------------------------------------------------------------------------- reports


@dataclass(frozen=True)
class KernelEnvelope:
    """C1 K_{s1}(t, x - xi) <= p(t, x) <= C2 K_{s2}(t, x - xi) with K Gaussian (s = sigma) or stable (s = a)."""

    C1: float
    sigma1: float
    C2: float
    sigma2: float
    family: str = "gaussian"
    alpha_s: float | None = None
    tight: tuple[float, float, float, float] | None = None
    margin: float = 0.0

    def __post_init__(self):
        if not self.C1 > 0:
            raise ValueError("C1 must be positive")
        if self.family == "gaussian" and self.sigma1 > self.sigma2:
            raise ValueError("gaussian envelope needs sigma1 <= sigma2")

    def kernel(self, s: float, t, y) -> np.ndarray:
        return _reference(self.family, self.alpha_s, s, t, y)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BoundReport:
    checked_points: int
    violations: int
    worst_ratio: float
    constants: dict
    window: tuple[float, float]
    details: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["certified"] = self.certified
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# --------------------------------------------------------------------------- path sampling


def _time_shift(path: DensityPath) -> float:
    # a Gaussian mollifier of sd w equals the heat flow run for w^2; it has no
    # such reading for stable paths, which are compared at their own time
    if "alpha_s" in path.meta:
        return 0.0
    w = path.meta.get("mollifier_sd", 0.0) or 0.0
    return float(w) ** 2


def scale_exponent(path: DensityPath) -> float:
    """Spatial scale t^p of the kernel: p = 1/2 for diffusions, 1/alpha_s for stable paths."""
    alpha_s = path.meta.get("alpha_s")
    return 0.5 if alpha_s is None else 1.0 / float(alpha_s)


def _xi(path: DensityPath, xi: float | None) -> float:
    if xi is not None:
        return float(xi)
    if "xi" not in path.meta:
        raise ValueError("path has no recorded start point; pass xi")
    return float(path.meta["xi"])


def _sample(path: DensityPath, xi: float, t_floor: float, c: float, t_max: float | None = None,
            half_width: float | None = None):
    """Saved slices with t >= max(t_floor, 16 dx^2), restricted to |x - xi| <= c t^p
    (or to the fixed window |x - xi| <= half_width when given).

    Returns (t, t_eff, y, u, dudx, index) with one entry per checked point.
    """
    dx = path.grid.dx
    lo = max(t_floor, 16 * dx * dx)
    shift = _time_shift(path)
    p = scale_exponent(path)
    x = path.grid.nodes
    ts, tes, ys, us, ds, idx = [], [], [], [], [], []
    for i, t in enumerate(path.saved_times):
        if t < lo - 1e-12 or (t_max is not None and t > t_max + 1e-12):
            continue
        u = path.slices[i]
        mask = np.abs(x - xi) <= (c * t**p if half_width is None else half_width)
        mask[0] = mask[-1] = False
        du = np.gradient(u, dx)
        n = int(mask.sum())
        ts.append(np.full(n, t))
        tes.append(np.full(n, t + shift))
        ys.append(x[mask] - xi)
        us.append(u[mask])
        ds.append(du[mask])
        idx.append(np.full(n, i))
    if not ts:
        raise ValueError(f"no saved slices with t >= {lo:.4g}")
    return tuple(np.concatenate(a) for a in (ts, tes, ys, us, ds, idx))


def _reference(family: str, alpha_s: float | None, s: float, t_eff: np.ndarray, y: np.ndarray) -> np.ndarray:
    if family == "gaussian":
        return gaussian_kernel(s, 1.0, y / np.sqrt(t_eff)) / np.sqrt(t_eff)
    if family == "stable":
        # self-similarity: S(t a, y) = (t a)^(-1/alpha) S(1, (t a)^(-1/alpha) y)
        out = np.empty_like(y)
        for te in np.unique(t_eff):
            m = t_eff == te
            out[m] = _stable_profile_eval(alpha_s, te * s, y[m])
        return out
    raise ValueError(f"unknown kernel family {family!r}")


# --------------------------------------------------------------------------- envelope fitting


def fit_envelope(
    path: DensityPath,
    family: str = "gaussian",
    *,
    xi: float | None = None,
    alpha_s: float | None = None,
    t_floor: float = DEFAULT_T_FLOOR,
    c: float = DEFAULT_C,
    s_range: tuple[float, float] = (0.25, 4.0),
    n_grid: int = 20,
    margin: float = CERT_MARGIN,
    half_width: float | None = None,
) -> KernelEnvelope:
    """Two-sided kernel envelope of a Dirac-start path on the checked region.

    For each scale s the tight constants are C1(s) = min p / K_s and
    C2(s) = max p / K_s.  s1 maximises C1, s2 minimises C2 (log-spaced search
    over ``s_range`` refined by a bounded 1-d minimisation).  The certified
    constants are the tight ones widened by ``margin``.
    """
    if family == "stable" and alpha_s is None:
        alpha_s = path.meta.get("alpha_s")
        if alpha_s is None:
            raise ValueError("stable family needs alpha_s")
    xi = _xi(path, xi)
    _, te, y, u, _, _ = _sample(path, xi, t_floor, c, half_width=half_width)
    if np.any(u <= 0):
        j = int(np.argmin(u))
        raise NoEnvelopeFound(f"path vanishes at t={te[j]:.4g}, x-xi={y[j]:.4g}; no lower bound possible")

    def c1(s):
        with np.errstate(divide="ignore", over="ignore"):
            return float(np.min(u / _reference(family, alpha_s, s, te, y)))

    def c2(s):
        with np.errstate(divide="ignore", over="ignore"):
            return float(np.max(u / _reference(family, alpha_s, s, te, y)))

    grid = np.geomspace(*s_range, n_grid)
    s1 = _refine(grid, lambda s: -c1(s))
    s2 = _refine(grid, c2)
    if family == "gaussian" and s1 > s2:
        s1 = s2
    C1, C2 = c1(s1), c2(s2)
    if not (C1 > 0 and math.isfinite(C2)):
        raise NoEnvelopeFound(f"no finite envelope for scales in {s_range}")
    # touching the edge of the search range means the range was too narrow
    for s, name in ((s1, "s1"), (s2, "s2")):
        if np.isclose(s, s_range[0]) or np.isclose(s, s_range[1]):
            raise NoEnvelopeFound(f"optimal {name}={s:.4g} sits on the edge of the search range {s_range}")
    return KernelEnvelope(
        C1=C1 * (1 - margin),
        sigma1=s1,
        C2=C2 * (1 + margin),
        sigma2=s2,
        family=family,
        alpha_s=alpha_s,
        tight=(C1, s1, C2, s2),
        margin=margin,
    )


def _refine(grid: np.ndarray, objective) -> float:
    vals = np.array([objective(s) for s in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    if lo == hi:
        return float(grid[i])
    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-8})
    return float(res.x) if res.fun <= vals[i] else float(grid[i])


def verify_envelope(
    path: DensityPath,
    env: KernelEnvelope,
    *,
    xi: float | None = None,
    t_floor: float = DEFAULT_T_FLOOR,
    c: float = DEFAULT_C,
    t_max: float | None = None,
    half_width: float | None = None,
) -> BoundReport:
    """Re-check an envelope pointwise on a (possibly different) path."""
    xi = _xi(path, xi)
    t, te, y, u, _, _ = _sample(path, xi, t_floor, c, t_max, half_width)
    lower = env.C1 * env.kernel(env.sigma1, te, y)
    upper = env.C2 * env.kernel(env.sigma2, te, y)
    bad = (u < lower) | (u > upper)
    with np.errstate(divide="ignore"):
        worst = float(max(np.max(lower / u), np.max(u / upper)))
    details = {}
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        details["first_violation"] = {"t": float(t[j]), "x_minus_xi": float(y[j]), "value": float(u[j])}
    return BoundReport(
        checked_points=int(t.size),
        violations=int(bad.sum()),
        worst_ratio=worst,
        constants=env.to_dict(),
        window=(float(t.min()), float(t.max())),
        details=details,
    )


# --------------------------------------------------------------------------- derivative bound


def check_derivative_bound(
    path: DensityPath,
    exponent: float | None = None,
    *,
    xi: float | None = None,
    t_floor: float = DEFAULT_T_FLOOR,
    c: float = DEFAULT_C,
    C: float | None = None,
) -> BoundReport:
    """Smallest C with |d_x p| <= C t^exponent p on the checked region (exponent fixed, not fitted).

    Per-slice constants are reported in ``details['per_time']`` so growth as
    t decreases (a wrong exponent) is visible.  With ``C`` given, violations of
    that constant are counted.  The default exponent is -1/2 for diffusions
    and -1/alpha_s for stable paths.
    """
    xi = _xi(path, xi)
    if exponent is None:
        exponent = -scale_exponent(path)
    t, te, y, u, du, _ = _sample(path, xi, t_floor, c)
    ratio = np.abs(du) / (te**exponent * u)
    per_time = {}
    for tt in np.unique(t):
        per_time[float(tt)] = float(ratio[t == tt].max())
    C_fit = float(ratio.max())
    violations = 0 if C is None else int(np.sum(ratio > C))
    return BoundReport(
        checked_points=int(t.size),
        violations=violations,
        worst_ratio=C_fit if C is None else C_fit / C,
        constants={"C": C_fit if C is None else C, "C_fit": C_fit, "exponent": exponent},
        window=(float(t.min()), float(t.max())),
        details={"per_time": per_time},
    )


# --------------------------------------------------------------------------- localization


def localization_certificate(paths: Sequence[DensityPath], alpha, eps: float = 1e-3) -> LocalizationCertificate:
    """One certificate (K, delta, eps) covering every saved slice of every path."""
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one path")
    grid = paths[0].grid
    for p in paths[1:]:
        if p.grid != grid:
            raise GridMismatch("paths must share one grid")

    def slices() -> Iterable[Density]:
        for p in paths:
            yield from p.densities(mass_tol=None)

    return localization_scan(slices(), alpha, eps)


def dirac_localization_check(
    path: DensityPath,
    alpha: float,
    *,
    xi: float | None = None,
    t_floor: float = DEFAULT_T_FLOOR,
    window: tuple[float, float] | None = None,
    eps: float = 1e-3,
) -> BoundReport:
    """t^p localization of a Dirac-start path around its start point.

    p is 1/2 for diffusions and 1/alpha_s for stable paths.  Fits
    K = max |Q_alpha(u_t) - xi| / t^p, the density floor
    delta = min t^p u_t over |x - xi| <= 2 K t^p, the tail radius
    K_eps = max r_eps(u_t) / t^p, and the log-log slope of |Q_alpha - xi|
    against t over ``window`` (default: all checked times).  The slope is None
    when the gap is below grid resolution (e.g. alpha = 1/2 for symmetric kernels).
    """
    xi = _xi(path, xi)
    dx = path.grid.dx
    lo = max(t_floor, 16 * dx * dx)
    x = path.grid.nodes
    alpha = float(alpha)
    if alpha in path.quantiles:
        times, q_all = path.times, path.quantiles[alpha]
    else:
        times = path.saved_times
        q_all = np.array([quantile(path.slice(i, mass_tol=None), alpha) for i in range(len(times))])
    sel = times >= lo - 1e-12
    t, q = times[sel], q_all[sel]
    gap = np.abs(q - xi)
    p = scale_exponent(path)
    K = float(np.max(gap / t**p))
    delta = np.inf
    K_eps = 0.0
    for i, ts in enumerate(path.saved_times):
        if ts < lo - 1e-12:
            continue
        u = path.slice(i, mass_tol=None)
        scale = ts**p
        half = max(2 * K * scale, dx)
        box = np.abs(x - xi) <= half
        delta = min(delta, float(u.values[box].min()) * scale)
        K_eps = max(K_eps, tail_radius(u, eps, xi) / scale)
    slope = None
    w_lo, w_hi = window or (float(t.min()), float(t.max()))
    in_win = (t >= w_lo - 1e-12) & (t <= w_hi + 1e-12)
    if np.all(gap[in_win] > dx):
        slope = float(np.polyfit(np.log(t[in_win]), np.log(gap[in_win]), 1)[0])
    return BoundReport(
        checked_points=int(sel.sum()),
        violations=0 if delta > 0 else 1,
        worst_ratio=K,
        constants={"K": K, "delta": delta, "K_eps": K_eps, "eps": eps, "alpha": alpha},
        window=(float(t.min()), float(t.max())),
        details={"slope": slope, "slope_window": (w_lo, w_hi), "max_gap": float(gap.max())},
    )
