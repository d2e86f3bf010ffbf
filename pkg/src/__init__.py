"""Instance-adaptive self-training lab for domain-adaptive semantic segmentation."""

__version__ = "0.3.0"
