"""Self-supervised pixel-pair pre-training from registered multi-view RGB-D data."""

__version__ = "0.1.0"

IGNORE_LABEL = 65535
