"""Fixed quadrature rules: 15-point Gauss-Kronrod and Gauss-Hermite."""

from dataclasses import dataclass

import numpy as np

# 15-point Kronrod extension of the 7-point Gauss rule on [-1, 1].
# Abscissas are symmetric; only the non-negative half is tabulated.
_GK15_ABSCISSAE = np.array([
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
])
_GK15_WEIGHTS = np.array([
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
])

GK15_NODES = np.concatenate([-_GK15_ABSCISSAE[:-1], _GK15_ABSCISSAE[::-1]])
GK15_WEIGHTS = np.concatenate([_GK15_WEIGHTS[:-1], _GK15_WEIGHTS[::-1]])


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a fixed rule."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        if len(self.nodes) != len(self.weights):
            raise ValueError("nodes and weights must have equal length")
        if self.kind == "gauss_kronrod_15" and len(self.nodes) != 15:
            raise ValueError("GK15 rule must have 15 nodes")
        if np.any(np.asarray(self.weights) <= 0):
            raise ValueError("quadrature weights must be positive")


def gk15_rule() -> QuadratureRule:
    return QuadratureRule(GK15_NODES.copy(), GK15_WEIGHTS.copy(), "gauss_kronrod_15")


def gk15_points(a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the GK15 rule rescaled to ``[a, b]``."""
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    return mid + half * GK15_NODES, half * GK15_WEIGHTS


def gk15(f, a: float, b: float) -> float:
    """15-point Gauss-Kronrod estimate of the integral of ``f`` over [a, b]."""
    if a > b:
        raise ValueError("integration bounds must satisfy a <= b")
    if a == b:
        return 0.0
    x, w = gk15_points(a, b)
    fx = np.asarray([f(xi) for xi in x], dtype=float)
    return float(w @ fx)


def panel_points(a: float, b: float, cuts=()) -> tuple[np.ndarray, np.ndarray]:
    """GK15 nodes/weights over [a, b] split into panels at interior ``cuts``."""
    edges = [a] + [c for c in sorted(cuts) if a < c < b] + [b]
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        x, w = gk15_points(lo, hi)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def gauss_hermite(n: int) -> QuadratureRule:
    """Physicists' Gauss-Hermite rule (weight exp(-x^2)) with ``n`` nodes."""
    if not 1 <= n <= 25:
        raise ValueError("gauss_hermite supports 1 <= n <= 25")
    nodes, weights = np.polynomial.hermite.hermgauss(n)
    return QuadratureRule(nodes, weights, "gauss_hermite")
