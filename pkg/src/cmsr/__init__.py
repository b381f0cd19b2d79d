"""Diffusion super-resolution (x4) distilled into a few-step consistency model.

Everything runs on numpy through the small reverse-mode autodiff in
:mod:`cmsr.tensor`.
"""

from .errors import CheckpointError, CmsrError, ConfigError, ContractError, InsufficientDataError, InvalidShapeError, NumericError

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CmsrError",
    "ConfigError",
    "ContractError",
    "InsufficientDataError",
    "InvalidShapeError",
    "NumericError",
    "__version__",
]
