"""Linear interacting particle systems on Z^d: diffusive-regime criterion, exact simulation, duality checks."""

__version__ = "0.1.0"

from .lattice import SparseField, GreenTable, green
from .kernels import KernelLaw, MomentBundle, bcpp, potlatch, smoothing, custom, build_law, moments

__all__ = [
    "SparseField",
    "GreenTable",
    "green",
    "KernelLaw",
    "MomentBundle",
    "bcpp",
    "potlatch",
    "smoothing",
    "custom",
    "build_law",
    "moments",
]
