"""Hierarchical context transformer for multi-level surgical scene understanding, at desk scale.

A numpy reverse-mode autodiff core, pooling-attention trunk, hierarchical
relation aggregation, inter-task contrastive loss, adapters, a synthetic
data generator, metrics, and a training/evaluation harness.
"""

from .errors import (ConfigError, DataError, DegenerateInputError, DimensionError, FormatError, HCTError,
                     NumericalError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DegenerateInputError", "DimensionError", "FormatError", "HCTError",
    "NumericalError", "UsageError", "__version__",
]
