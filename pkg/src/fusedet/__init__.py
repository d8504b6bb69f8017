"""fusedet: a small one-stage detector with directional and attention-based
feature fusion, built on a from-scratch reverse-mode autodiff engine.

The package is numpy-only at runtime. Subpackages:

- tensor: tape autodiff over float64 arrays
- fusion: directional detail fusion, attention-weighted concat, cross-layer
  attention fusion, fast-normalized weighted sums
- detector: model graph, box decoding, target assignment, loss
- data: synthetic grayscale dataset, PGM and annotation IO, letterboxing
- metrics: greedy matching and average precision
- train: SGD loop with validation and bit-exact resume
- checkpoint: binary parameter container
- config: flat key=value config files with CLI overrides
- cli: the `fusedet` command
"""

from .errors import (
    BuildError,
    CheckError,
    ConfigError,
    DataError,
    DatasetIOError,
    FileFormatError,
    FusedetError,
    NumericError,
    ShapeError,
    TapeStateError,
)
from .tensor import Parameter, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "FusedetError",
    "ShapeError",
    "ConfigError",
    "BuildError",
    "NumericError",
    "TapeStateError",
    "CheckError",
    "DataError",
    "FileFormatError",
    "DatasetIOError",
    "__version__",
]
