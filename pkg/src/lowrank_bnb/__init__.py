"""Branch-and-bound for low-rank matrix completion with eigenvector disjunctions."""

__version__ = "0.1.0"
