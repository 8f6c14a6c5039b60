from .quadrature import (
    GK15_NODES,
    GK15_WEIGHTS,
    QuadratureRule,
    gauss_hermite,
    gk15,
    gk15_points,
    gk15_rule,
    panel_points,
)
from .special import brent_root, norm_cdf, norm_pdf, std_normal
from .splines import NcsBasis, bspline_design

__all__ = [
    "GK15_NODES",
    "GK15_WEIGHTS",
    "QuadratureRule",
    "NcsBasis",
    "bspline_design",
    "brent_root",
    "gauss_hermite",
    "gk15",
    "gk15_points",
    "gk15_rule",
    "norm_cdf",
    "norm_pdf",
    "panel_points",
    "std_normal",
]
