"""Full-body motion reconstruction from sparse pairwise-distance streams."""

__version__ = "0.1.0"
