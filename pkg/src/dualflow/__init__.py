"""Joint RGB + pointmap flow matching with decoupled adapter branches, masked
conditioning, pointmap post-optimization and depth/trajectory metrics."""

__version__ = "0.1.0"
