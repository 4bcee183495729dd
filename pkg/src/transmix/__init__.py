"""Toy vision-transformer toolkit with attention-guided mixup labels (TransMix)."""

from ._kernels import HAS_NUMBA
from .errors import ConfigError, ContractError, FormatError, ShapeError, TransmixError

__version__ = "0.1.0"

__all__ = [
    "HAS_NUMBA",
    "ConfigError",
    "ContractError",
    "FormatError",
    "ShapeError",
    "TransmixError",
]
