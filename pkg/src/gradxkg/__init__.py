"""Gradient-based node saliency for RGCN temporal knowledge graph reasoners."""

from gradxkg.autodiff import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    ewise,
    finite_diff_check,
    matmul,
    reduce,
)

__version__ = "0.1.0"
