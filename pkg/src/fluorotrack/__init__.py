"""Patient-specific low-rank respiratory motion estimation.

The package builds a motion subspace from a 4D density series via
rank-constrained mass-preserving registration, renders projection images of
subspace-deformed volumes, trains a small convolutional regressor to recover
subspace weights from a single projection, and evaluates the recovered
deformations geometrically.
"""

__version__ = "0.1.0"
