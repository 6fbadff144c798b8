"""Compiled tridiagonal kernels for the Crank-Nicolson steps.

The implicit matrices are M-matrices (positive diagonal, non-positive
off-diagonals, column diagonal dominance), so the Thomas algorithm needs no
pivoting.
"""
import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def cn_step(lower, diag, upper, u, h, out, work):
    """Solve (I - h A) x = (I + h A) u for tridiagonal A = (lower, diag, upper); result in ``out``."""
    n = u.shape[0]
    # forward sweep, assembling the right-hand side on the fly
    rhs = u[0] + h * (diag[0] * u[0] + upper[0] * u[1])
    m = 1.0 - h * diag[0]
    work[0] = -h * upper[0] / m
    out[0] = rhs / m
    for i in range(1, n):
        rhs = u[i] + h * (diag[i] * u[i] + lower[i - 1] * u[i - 1])
        if i < n - 1:
            rhs += h * upper[i] * u[i + 1]
        sub = -h * lower[i - 1]
        m = 1.0 - h * diag[i] - sub * work[i - 1]
        if i < n - 1:
            work[i] = -h * upper[i] / m
        out[i] = (rhs - sub * out[i - 1]) / m
    for i in range(n - 2, -1, -1):
        out[i] -= work[i] * out[i + 1]
    return out


@numba.njit(cache=True, nogil=True)
def cn_factor(lower, diag, upper, h, cp, inv_m):
    """Thomas elimination factors of I - h A, for repeated solves with the same A."""
    n = diag.shape[0]
    inv_m[0] = 1.0 / (1.0 - h * diag[0])
    cp[0] = -h * upper[0] * inv_m[0]
    for i in range(1, n):
        inv_m[i] = 1.0 / (1.0 - h * diag[i] + h * lower[i - 1] * cp[i - 1])
        if i < n - 1:
            cp[i] = -h * upper[i] * inv_m[i]


@numba.njit(cache=True, nogil=True)
def cn_step_factored(lower, diag, upper, h, cp, inv_m, u, out):
    n = u.shape[0]
    out[0] = (u[0] + h * (diag[0] * u[0] + upper[0] * u[1])) * inv_m[0]
    for i in range(1, n):
        rhs = u[i] + h * (diag[i] * u[i] + lower[i - 1] * u[i - 1])
        if i < n - 1:
            rhs += h * upper[i] * u[i + 1]
        out[i] = (rhs + h * lower[i - 1] * out[i - 1]) * inv_m[i]
    for i in range(n - 2, -1, -1):
        out[i] -= cp[i] * out[i + 1]
    return out


@numba.njit(cache=True, nogil=True)
def tridiag_solve(sub, main, sup, rhs, out, work):
    """Plain Thomas solve of a diagonally dominant tridiagonal system."""
    n = rhs.shape[0]
    m = main[0]
    work[0] = sup[0] / m
    out[0] = rhs[0] / m
    for i in range(1, n):
        m = main[i] - sub[i - 1] * work[i - 1]
        if i < n - 1:
            work[i] = sup[i] / m
        out[i] = (rhs[i] - sub[i - 1] * out[i - 1]) / m
    for i in range(n - 2, -1, -1):
        out[i] -= work[i] * out[i + 1]
    return out


@numba.njit(cache=True, nogil=True)
def chang_cooper_weights(D, b, dx, left, diag, right):
    """Flux weights of the drift-diffusion generator; returns the largest |diag| entry.

    Interface i + 1/2 carries F = b (delta u_i + (1 - delta) u_{i+1}) - (D_{i+1} u_{i+1} - D_i u_i) / dx
    with delta as close to 1/2 as non-negative off-diagonals allow.
    """
    n = D.shape[0]
    for i in range(n):
        diag[i] = 0.0
    for i in range(n - 1):
        bi = b[i]
        lo = 0.0
        hi = 1.0
        # compare before dividing: b dx can underflow to zero for tiny b
        p = bi * dx
        if p > D[i + 1]:
            lo = 1.0 - D[i + 1] / p
        elif -p > D[i]:
            hi = D[i] / -p
        delta = min(max(0.5, lo), hi)
        left[i] = (bi * delta + D[i] / dx) / dx
        right[i] = (D[i + 1] / dx - bi * (1.0 - delta)) / dx
        diag[i] -= left[i]
        diag[i + 1] -= right[i]
    worst = 0.0
    for i in range(n):
        worst = max(worst, -diag[i])
    return worst


def warm_up():
    z = np.zeros(8)
    cn_step(z[:7], z, z[:7], z, 0.0, np.zeros(8), np.zeros(8))
    cp, inv_m = np.zeros(8), np.zeros(8)
    cn_factor(z[:7], z, z[:7], 0.0, cp, inv_m)
    cn_step_factored(z[:7], z, z[:7], 0.0, cp, inv_m, z, np.zeros(8))
    chang_cooper_weights(np.ones(8), z[:7], 1.0, np.zeros(7), np.zeros(8), np.zeros(7))
    tridiag_solve(z[:7], np.ones(8), z[:7], z, np.zeros(8), np.zeros(8))
