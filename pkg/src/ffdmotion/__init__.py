"""Low-rank, topology-preserving B-spline motion estimation for image sequences."""

__version__ = "0.1.0"
