"""Recurrent language-model cells with compression and size accounting.

The package trains word-level RNN/LSTM/GRU language models from scratch
(numpy only, manual backpropagation through time) and shrinks them with
four techniques that compose in a pipeline: magnitude pruning, 8-bit
quantization, low-rank factorization with a shared projection, and
tensor-train decomposition.  Exact parameter/size accounting, perplexity
evaluation, and an inference microbenchmark round out the toolkit; the
``rnnpack`` command line exposes all of it.
"""

from . import backend
from .errors import (
    FormatError,
    IntegrityError,
    NumericError,
    ParameterError,
    RnnpackError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "backend",
    "RnnpackError",
    "ShapeError",
    "ParameterError",
    "NumericError",
    "FormatError",
    "IntegrityError",
    "__version__",
]
