"""Multi-interest candidate-generation recommender with backward-flow regularization."""

__version__ = "0.1.0"
