"""Discriminative normalization flows for class-labelled vectors.

A masked autoregressive flow maps each class onto a unit-covariance Gaussian
with its own mean, which makes class distributions homogeneous and Gaussian
before linear back-ends (LDA, PLDA, cosine) are applied.
"""

__version__ = "0.1.0"

# binary container magics and their current versions
FORMATS = {"VEC1": 1, "DNF1": 1, "LIN1": 1, "PLD1": 1, "PRI1": 1}

from .errors import DataError, DnfError, NumericError  # noqa: E402

__all__ = ["__version__", "FORMATS", "DnfError", "DataError", "NumericError"]
