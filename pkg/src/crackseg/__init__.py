"""Self-supervised multi-scale crack segmentation."""

__version__ = "0.1.0"
