"""metalab: a numerical laboratory for metastable diffusion generators.

Builds Witten Laplacians of threefold-symmetric Morse potentials, their
anti-adjoint and saddle-localized perturbations, and the exactly solvable
rotating harmonic model; computes low-lying spectra, quasimode interaction
matrices, Jordan-block continuations and semigroup signatures.
"""

__version__ = "0.1.0"

from .potential import (  # noqa: F401
    MorseSurface,
    HarmonicPotential,
    CriticalPoint,
    GeometrySummary,
    SurfaceValidationError,
    build_surface,
    find_critical_points,
    geometry_summary,
)
