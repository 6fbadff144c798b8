"""Independent reference computations (quadrature, closed forms) used to freeze expected values."""
import math

import numpy as np
from scipy import integrate, optimize


def gauss(t, x, sigma=1.0):
    return np.exp(-np.asarray(x) ** 2 / (2 * t * sigma**2)) / math.sqrt(2 * math.pi * t * sigma**2)


def normal_cdf_quad(x):
    """Standard normal CDF by adaptive quadrature (no special functions)."""
    if x < 0:
        return 1.0 - normal_cdf_quad(-x)
    val, _ = integrate.quad(lambda s: math.exp(-s * s / 2) / math.sqrt(2 * math.pi), 0.0, x, epsabs=1e-14, epsrel=1e-14)
    return 0.5 + val


def normal_quantile_quad(p):
    return optimize.brentq(lambda x: normal_cdf_quad(x) - p, -10, 10, xtol=1e-14)


def l1_quad(f, g, lo=-np.inf, hi=np.inf, points=None):
    val, _ = integrate.quad(lambda x: abs(f(x) - g(x)), lo, hi, points=points, limit=400, epsabs=1e-13)
    return val


def shifted_gaussian_l1(var, shift):
    """||N(0, var) - N(shift, var)||_1 in closed form: 2 (2 Phi(|shift| / (2 sd)) - 1)."""
    sd = math.sqrt(var)
    return 2 * math.erf(abs(shift) / (2 * sd) / math.sqrt(2))


def gaussian_variance_l1(v1, v2):
    """||N(0, v1) - N(0, v2)||_1 in closed form via the two crossing points."""
    if v1 == v2:
        return 0.0
    lo, hi = sorted((v1, v2))
    x = math.sqrt(lo * hi * math.log(hi / lo) / (hi - lo))
    cdf = lambda v: math.erf(x / math.sqrt(2 * v))  # mass of N(0, v) in [-x, x]
    return 2 * (cdf(lo) - cdf(hi))


def stable_pdf_quad(alpha, t, x, dt_order=0):
    """Symmetric stable density with characteristic function exp(-t |k|^alpha), or its
    t-derivative (dt_order=1), by the cosine-weighted Fourier integral.  The integrand
    is below 1e-17 beyond k_max = (40 / t)^(1 / alpha)."""
    k_max = (40.0 / t) ** (1.0 / alpha)

    def f(k):
        return (-(k**alpha)) ** dt_order * math.exp(-t * k**alpha) / math.pi

    out = [
        integrate.quad(f, 0, k_max, weight="cos", wvar=float(xi), epsabs=1e-15, limit=400)[0]
        for xi in np.atleast_1d(x)
    ]
    return np.array(out)
