"""Interacting particles whose drift and diffusion see the ensemble's empirical quantile.

Euler-Maruyama with the quantile recomputed every step.  Normals come from a
counter-based generator (Philox) keyed by the seed, with one counter block per
step and one draw per particle inside it, so a run is reproducible from
(seed, N, dt) alone and does not depend on how the work is scheduled.
Particles are identified by their initial rank, which makes the quantile path
invariant under permutations of an explicitly given initial ensemble.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .coeffs import CoefficientField
from .density import Density, QuantileLevels, cdf
from .errors import HorizonMismatch, NonFinitePosition
from .linfp import QuantileCurve, _steps
from .nonlinear import NonlinearSolution

log = logging.getLogger(__name__)

GENERATOR = "numpy.random.Philox(key=seed, counter=[0, 0, tag, step]); normals by Generator.standard_normal (ziggurat)"
_TAG_NOISE = 0
_TAG_INIT = 1


def _levels(alpha) -> np.ndarray:
    return np.array(list(QuantileLevels.of(alpha)), dtype=float)


def _order_index(a: float, n: int) -> int:
    # ceil(a n) - 1, guarded against a n landing a rounding error above an integer
    return max(math.ceil(round(a * n, 9)), 1) - 1


def empirical_quantile(positions, alpha) -> np.ndarray:
    """Per coordinate j, the ceil(alpha_j N)-th order statistic (left-continuous inverse)."""
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 particles, got {n}")
    a = _levels(alpha)
    if a.size != d:
        raise ValueError(f"{a.size} quantile levels for {d}-dimensional positions")
    out = np.empty(d)
    for j in range(d):
        k = _order_index(a[j], n)
        out[j] = np.partition(x[:, j], k)[k]
    return out


def _stream(seed: int, tag: int, step: int) -> np.random.Philox:
    return np.random.Philox(key=int(seed), counter=[0, 0, tag, step])


def _uniforms(seed: int, tag: int, step: int, n: int) -> np.ndarray:
    raw = _stream(seed, tag, step).random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normals(seed: int, step: int, n: int) -> np.ndarray:
    """Normals for one Euler step from a fresh stream per (seed, step); the first k draws do not depend on n."""
    return np.random.Generator(_stream(seed, _TAG_NOISE, step)).standard_normal(n)


def sample_initial(init, n: int, seed: int) -> np.ndarray:
    """Initial positions sorted by particle id (= initial rank).

    ``init`` is a 1-d Density (inverse CDF of stratified uniforms
    (i + V_i) / N), a point (all particles there), or explicit positions.
    """
    if isinstance(init, Density):
        if init.dim != 1:
            raise ValueError("density initialisation is one-dimensional")
        edges, C = cdf(init)
        u = (np.arange(n) + _uniforms(seed, _TAG_INIT, 0, n)) / n
        # drop flat stretches so the inverse is single valued
        keep = np.concatenate([[True], np.diff(C) > 0])
        x = np.interp(u * C[-1], C[keep], edges[keep])
    elif np.ndim(init) == 0:
        x = np.full(n, float(init))
    else:
        x = np.sort(np.asarray(init, dtype=float))
        if x.size != n:
            raise ValueError(f"{x.size} initial positions given for N={n}")
    if not np.all(np.isfinite(x)):
        raise NonFinitePosition(0, int(np.flatnonzero(~np.isfinite(x))[0]))
    return x


@dataclass
class SimulationRecord:
    times: np.ndarray
    quantiles: np.ndarray  # (n_steps + 1, d)
    alpha: np.ndarray
    snapshots: dict[float, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def curve(self) -> QuantileCurve:
        return QuantileCurve(self.times, self.quantiles)

    def at(self, t) -> np.ndarray:
        return np.interp(t, self.times, self.quantiles[:, 0])

    def write(self, out_dir: str | Path) -> Path:
        """record.csv (t, q_1..q_d), one CSV per snapshot, manifest.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = self.quantiles.shape[1]
        with open(out / "record.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"q_{j + 1}" for j in range(d)])
            for t, q in zip(self.times, self.quantiles):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in q])
        snaps = []
        for i, (t, x) in enumerate(sorted(self.snapshots.items())):
            name = f"snapshot_{i:03d}.csv"
            np.savetxt(out / name, x, fmt="%.17g", header="x", comments="")
            snaps.append({"t": t, "file": name})
        manifest = dict(self.meta, alpha=self.alpha.tolist(), T=self.T, n_nodes=len(self.times), snapshots=snaps)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return out


def simulate(
    model: CoefficientField,
    init,
    n: int,
    dt: float,
    T: float,
    seed: int,
    alpha=0.5,
    *,
    omega: QuantileCurve | Callable | None = None,
    snapshot_times: Sequence[float] = (),
    box: tuple[float, float] | None = None,
) -> SimulationRecord:
    """Euler-Maruyama for dX = b(t, X, Q_t) dt + sigma(t, X, Q_t) dW with Q_t the empirical quantile.

    With ``omega`` given, the coefficients see that curve instead (decoupled
    replay) while the empirical quantile is still recorded.  ``box`` only
    counts excursions; it never alters the dynamics.
    """
    if n < 2:
        raise ValueError(f"need at least 2 particles, got {n}")
    a = _levels(alpha)
    if a.size != 1:
        raise ValueError("particle dynamics are one-dimensional")
    n_steps, dt = _steps(T, dt)
    x = sample_initial(init, n, seed)
    sq = math.sqrt(dt)
    times = np.arange(n_steps + 1) * dt
    qs = np.empty((n_steps + 1, 1))
    snap_steps = {int(round(t / dt)): float(t) for t in snapshot_times if 0 <= t <= T + 1e-12}
    snapshots: dict[float, np.ndarray] = {}
    excursions = 0
    k_idx = _order_index(a[0], n)
    for k in range(n_steps + 1):
        q = float(np.partition(x, k_idx)[k_idx])
        qs[k, 0] = q
        if k in snap_steps:
            snapshots[snap_steps[k]] = x.copy()
        if box is not None:
            excursions += int(np.count_nonzero((x < box[0]) | (x > box[1])))
        if k == n_steps:
            break
        t = k * dt
        w = q if omega is None else omega(t)
        drift = model.b(t, x, w)
        vol = model.sigma(t, x, w)
        x = x + drift * dt + vol * sq * standard_normals(seed, k, n)
        bad = ~np.isfinite(x)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonFinitePosition(k + 1, i)
    if excursions:
        log.warning("%d particle-steps outside the box %s", excursions, box)
    meta = {
        "seed": int(seed),
        "N": int(n),
        "dt": dt,
        "n_steps": n_steps,
        "generator": GENERATOR,
        "model": model.name,
        "params": model.params,
        "init": _describe(init),
        "replay": omega is not None,
        "excursions": excursions,
    }
    return SimulationRecord(times, qs, a, snapshots, meta)


def _describe(init) -> dict:
    if isinstance(init, Density):
        g = init.grid
        return {"kind": "density", "x_min": g.x_min, "x_max": g.x_max, "n": g.n}
    if np.ndim(init) == 0:
        return {"kind": "point", "xi": float(init)}
    return {"kind": "positions", "n": int(np.size(init))}


def replicate(seeds: Sequence[int], *args, workers: int = 1, **kwargs) -> list[SimulationRecord]:
    """simulate(...) once per seed; runs are independent and may use threads."""
    run = lambda s: simulate(*args, seed=s, **kwargs)  # noqa: E731
    if workers <= 1:
        return [run(s) for s in seeds]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, seeds))


def chaos_gap(record: SimulationRecord, pde: NonlinearSolution | QuantileCurve) -> dict:
    """sup over the PDE time nodes of |empirical quantile - omega*| (record interpolated)."""
    curve = pde.omega if isinstance(pde, NonlinearSolution) else pde
    tp = curve.times
    tol = 1e-9 * max(1.0, record.T)
    if abs(tp[0] - record.times[0]) > tol or abs(tp[-1] - record.T) > tol:
        raise HorizonMismatch(
            f"record covers [{record.times[0]:.6g}, {record.T:.6g}], PDE covers [{tp[0]:.6g}, {tp[-1]:.6g}]"
        )
    gaps = np.abs(record.at(tp) - curve.values[:, 0])
    i = int(np.argmax(gaps))
    return {"sup": float(gaps[i]), "t_sup": float(tp[i]), "times": tp, "gaps": gaps, "N": record.meta.get("N")}
