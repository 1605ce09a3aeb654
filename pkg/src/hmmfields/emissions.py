"""State-dependent densities and predictor pieces for the model families.

All log-densities are vectorized over observations. The exponentially
modified Gaussian uses a scaled-erfc branch so the log stays finite far
into the tail, where erfc itself underflows.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc, erfcx, gammaln

_SQRT_PI = np.sqrt(np.pi)


def gamma_logdensity(x, mean, sd):
    """Gamma log-density in mean/sd parameterization.

    Shape is mean^2/sd^2, rate mean/sd^2; out-of-support x <= 0 maps to -inf.
    """
    x = np.asarray(x, dtype=float)
    shape = mean**2 / sd**2
    rate = mean / sd**2
    with np.errstate(divide="ignore", invalid="ignore"):
        core = (
            shape * np.log(rate)
            - gammaln(shape)
            + (shape - 1.0) * np.log(x)
            - rate * x
        )
    return np.where(x > 0, core, -np.inf)


def wrapped_cauchy_logdensity(angle, loc, conc):
    """Wrapped Cauchy log-density on (-pi, pi] with concentration in [0, 1)."""
    angle = np.asarray(angle, dtype=float)
    return np.log(1.0 - conc**2) - np.log(
        2.0 * np.pi * (1.0 + conc**2 - 2.0 * conc * np.cos(angle - loc))
    )


def _log_erfc(z):
    """log(erfc(z)), stable for large positive z via the scaled form."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        tail = np.log(erfcx(np.minimum(z, np.inf))) - z * z
        body = np.log(erfc(z))
    return np.where(z > 5.0, tail, body)


def _dlog_erfc(z):
    """d/dz log erfc(z) = -2 / (sqrt(pi) erfcx(z)); decays to 0 for z << 0."""
    with np.errstate(over="ignore"):
        e = erfcx(np.asarray(z, dtype=float))
    out = np.where(np.isfinite(e), -2.0 / (_SQRT_PI * e), 0.0)
    return out


def emg_logdensity(y, loc, sigma, lam):
    """Exponentially modified Gaussian: Normal(loc, sigma^2) + Exp(lam)."""
    y = np.asarray(y, dtype=float)
    z = (loc + lam * sigma**2 - y) / (np.sqrt(2.0) * sigma)
    return (
        np.log(lam / 2.0)
        + (lam / 2.0) * (2.0 * loc + lam * sigma**2 - 2.0 * y)
        + _log_erfc(z)
    )


def emg_logdensity_derivatives(y, loc, sigma, lam):
    """(lf, d/dloc, d/dy, d2/dloc2, d2/dlocdy, d2/dy2) of the EMG log-density."""
    y = np.asarray(y, dtype=float)
    s2 = np.sqrt(2.0) * sigma
    z = (loc + lam * sigma**2 - y) / s2
    lf = (
        np.log(lam / 2.0)
        + (lam / 2.0) * (2.0 * loc + lam * sigma**2 - 2.0 * y)
        + _log_erfc(z)
    )
    d1 = _dlog_erfc(z)
    d2 = -2.0 * z * d1 - d1 * d1  # second derivative of log erfc
    dloc = lam + d1 / s2
    dy = -lam - d1 / s2
    dloc2 = d2 / (2.0 * sigma**2)
    dlocdy = -d2 / (2.0 * sigma**2)
    dy2 = d2 / (2.0 * sigma**2)
    return lf, dloc, dy, dloc2, dlocdy, dy2


def periodic_predictor(hour, coeffs):
    """Order-3 trigonometric predictor of the hour of day (period 24).

    ``coeffs`` holds the three sine coefficients followed by the three
    cosine coefficients.
    """
    hour = np.asarray(hour, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    out = np.zeros_like(hour, dtype=float)
    for k in (1, 2, 3):
        w = 2.0 * np.pi * k * hour / 24.0
        out = out + coeffs[k - 1] * np.sin(w) + coeffs[3 + k - 1] * np.cos(w)
    return out


def gaussian_logdensity(x, mean, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * np.log(2.0 * np.pi * sd**2) - (x - mean) ** 2 / (2.0 * sd**2)
