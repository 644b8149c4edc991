"""Numerical laboratory for semilinear path-dependent PDEs driven by SDEs on a
spectrally truncated Hilbert space."""

__version__ = "0.1.0"

from .errors import NonContractionError, NumericalError, TreeSizeError
from .paths import DiscretePath, PathView, d_infty, make_grid, stop_path, sup_norm
from .sde import ControlledSdeProblem, SdeProblem
from .spectral import SpectralModel

__all__ = ["ControlledSdeProblem", "DiscretePath", "NonContractionError", "NumericalError",
           "PathView", "SdeProblem", "SpectralModel", "TreeSizeError", "d_infty", "make_grid",
           "stop_path", "sup_norm", "__version__"]
