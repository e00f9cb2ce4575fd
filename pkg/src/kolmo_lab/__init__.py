"""Numerical toolkit and inequality harness for degenerate Kolmogorov operators."""

from .model import (
    Group,
    GroupPoint,
    ModelStructure,
    build_structure,
    canonical_b,
    compose,
    dilate,
    distance,
    hom_norm,
    inverse,
    matrix_exp,
)

__version__ = "0.1.0"
