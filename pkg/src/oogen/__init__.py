"""Few-shot out-of-graph link prediction with graph extrapolation layers."""
__version__ = "0.1.0"
