"""Scale-aware re-sampling blocks for semantic segmentation, in plain numpy."""

__version__ = "0.1.0"
