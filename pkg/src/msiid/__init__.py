"""Multispectral intrinsic image decomposition in low-rank spectral subspaces."""

from .kernels import BACKEND
from .solve import Decomposition, SolverConfig, decompose
from .speccube import SpectralCube, load_cube, save_cube
from .weights import WeightParams

__version__ = "0.1.0"

__all__ = ["BACKEND", "Decomposition", "SolverConfig", "SpectralCube", "WeightParams",
           "decompose", "load_cube", "save_cube", "__version__"]
