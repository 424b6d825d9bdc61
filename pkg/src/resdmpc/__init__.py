"""Attack-resilient distributed model predictive control for networked microgrids."""

from . import adapt, adi, dmpc, dynamics, exchange, microgrid, solver
from .errors import ResdmpcError

__version__ = "0.1.0"

__all__ = ["ResdmpcError", "adapt", "adi", "dmpc", "dynamics", "exchange", "microgrid", "solver",
           "__version__"]
