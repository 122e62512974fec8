"""Interval-group spatial-spectral state-space classifier for hyperspectral scenes.

Everything down to the autodiff tape lives here: no ML framework, numpy only.
"""

from igmamba.tensor import Tensor, ShapeError, ContractError

__all__ = ["Tensor", "ShapeError", "ContractError"]
__version__ = "0.1.0"
