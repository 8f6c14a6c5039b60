"""Standard-normal functions and bracketed root finding."""

import numpy as np
from scipy import optimize, special

from ..errors import NumericalError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / _SQRT_2PI
    return float(out) if out.ndim == 0 else out


def norm_cdf(x):
    x = np.asarray(x, dtype=float)
    out = special.ndtr(x)
    return float(out) if out.ndim == 0 else out


def std_normal(x: float) -> tuple[float, float]:
    """Density and distribution function of N(0, 1) at ``x``."""
    return norm_pdf(x), norm_cdf(x)


def brent_root(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    """Root of ``f`` in [lo, hi]; the bracket must contain a sign change."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise NumericalError(
            f"no sign change on [{lo}, {hi}]: f(lo)={flo:.6g}, f(hi)={fhi:.6g}"
        )
    return float(optimize.brentq(f, lo, hi, xtol=tol))
