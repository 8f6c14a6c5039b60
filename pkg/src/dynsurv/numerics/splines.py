"""Natural cubic spline basis and B-spline design matrices.

The natural basis uses a monotone-onset convention: with knots
``(lo, k_1, ..., k_m, hi)`` the q-th basis function is the unique natural
cubic interpolant of the unit step at knot ``q+1`` (0 at knots 1..q, 1 at
knots q+1..m+2). Together with the intercept these span the full natural
cubic spline space on the knot sequence; the basis has dimension ``m + 1``,
every basis function vanishes at the lower boundary knot and equals 1 at the
upper one, and the natural condition makes all of them linear beyond the
boundary knots.
"""

import numpy as np
from scipy.interpolate import BSpline, CubicSpline


class NcsBasis:
    """Natural cubic spline basis with exact derivative and running integral."""

    def __init__(self, boundary_knots: tuple[float, float], internal_knots=()):
        lo, hi = float(boundary_knots[0]), float(boundary_knots[1])
        internal = tuple(float(k) for k in internal_knots)
        if not lo < hi:
            raise ValueError("boundary knots must satisfy lo < hi")
        if any(not lo < k < hi for k in internal):
            raise ValueError("internal knots must lie strictly inside the boundary")
        if list(internal) != sorted(set(internal)):
            raise ValueError("internal knots must be strictly increasing")
        self.boundary_knots = (lo, hi)
        self.internal_knots = internal
        self.knots = np.array([lo, *internal, hi])
        self.dimension = len(internal) + 1

        steps = np.arange(len(self.knots))
        self._splines = [
            CubicSpline(self.knots, (steps >= q + 1).astype(float), bc_type="natural")
            for q in range(self.dimension)
        ]
        self._derivs = [s.derivative() for s in self._splines]
        self._antiderivs = [s.antiderivative() for s in self._splines]
        # Boundary values/slopes pin the linear tails.
        self._val_lo = np.array([s(lo) for s in self._splines])
        self._val_hi = np.array([s(hi) for s in self._splines])
        self._slope_lo = np.array([d(lo) for d in self._derivs])
        self._slope_hi = np.array([d(hi) for d in self._derivs])
        self._area_hi = np.array([a(hi) - a(lo) for a in self._antiderivs])

    def __repr__(self):
        return f"NcsBasis(boundary={self.boundary_knots}, internal={self.internal_knots})"

    def _piecewise(self, t, inside, below, above):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        lo, hi = self.boundary_knots
        out = np.empty((t.size, self.dimension))
        m_below = t < lo
        m_above = t > hi
        m_in = ~(m_below | m_above)
        if m_in.any():
            out[m_in] = inside(t[m_in])
        if m_below.any():
            out[m_below] = below(t[m_below])
        if m_above.any():
            out[m_above] = above(t[m_above])
        return out[0] if scalar else out

    def eval(self, t):
        """Basis values B_1(t), ..., B_d(t); linear beyond the boundaries."""
        return self._piecewise(
            t,
            inside=lambda x: np.column_stack([s(x) for s in self._splines]),
            below=lambda x: self._val_lo + np.outer(x - self.boundary_knots[0], self._slope_lo),
            above=lambda x: self._val_hi + np.outer(x - self.boundary_knots[1], self._slope_hi),
        )

    def deriv(self, t):
        """First derivative of each basis function; constant beyond the boundaries."""
        return self._piecewise(
            t,
            inside=lambda x: np.column_stack([d(x) for d in self._derivs]),
            below=lambda x: np.broadcast_to(self._slope_lo, (x.size, self.dimension)).copy(),
            above=lambda x: np.broadcast_to(self._slope_hi, (x.size, self.dimension)).copy(),
        )

    def _area_from_lo(self, t):
        """Componentwise integral from the lower boundary knot to t."""
        lo, hi = self.boundary_knots

        def inside(x):
            return np.column_stack([a(x) - a(lo) for a in self._antiderivs])

        def below(x):
            d = x[:, None] - lo
            return self._val_lo * d + 0.5 * self._slope_lo * d * d

        def above(x):
            d = x[:, None] - hi
            return self._area_hi + self._val_hi * d + 0.5 * self._slope_hi * d * d

        return self._piecewise(t, inside=inside, below=below, above=above)

    def integral(self, t):
        """Componentwise running integral from 0 to t (exact, closed form)."""
        return self._area_from_lo(t) - self._area_from_lo(0.0)


def bspline_design(t, boundary_knots, internal_knots, drop_first=True, clamp=True):
    """Cubic B-spline design matrix on the given knot sequence.

    With ``drop_first`` the leading column is removed so the design can be
    combined with a free intercept (the full cubic B-spline basis sums to 1).
    Values outside the boundary are clamped to the boundary when ``clamp``.
    """
    lo, hi = float(boundary_knots[0]), float(boundary_knots[1])
    internal = [float(k) for k in internal_knots]
    if any(not lo < k < hi for k in internal) or internal != sorted(internal):
        raise ValueError("internal knots must be strictly increasing inside the boundary")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if clamp:
        t = np.clip(t, lo, hi)
    aug = np.r_[[lo] * 4, internal, [hi] * 4]
    design = BSpline.design_matrix(t, aug, 3, extrapolate=False).toarray()
    return design[:, 1:] if drop_first else design
