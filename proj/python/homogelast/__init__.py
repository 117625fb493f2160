"""Periodic homogenization of non-convex elastic energies in 2D.

Thin Python layer over the C++ core: density models, the matching convex
lower bound, periodic cell correctors, the homogenized density and its
derivatives, and two-scale expansion error studies.
"""

from homogelast._core import (  # noqa: F401
    CalibrationRecord,
    ConvexBound,
    DensityModel,
    calibrate,
    certify,
    d2w_hom,
    det_calculus,
    dist_so,
    dw_hom,
    error_study,
    rank_one_certificate,
    rank_one_min,
    rotation,
    single_vs_multicell,
    solve_corrector,
    solve_layered,
    verify_matching,
    w_hom,
)

__all__ = [
    "CalibrationRecord",
    "ConvexBound",
    "DensityModel",
    "calibrate",
    "certify",
    "d2w_hom",
    "det_calculus",
    "dist_so",
    "dw_hom",
    "error_study",
    "rank_one_certificate",
    "rank_one_min",
    "rotation",
    "single_vs_multicell",
    "solve_corrector",
    "solve_layered",
    "verify_matching",
    "w_hom",
]
