"""Shadow synthesis, probabilistic shadow removal, and region-wise evaluation."""

__version__ = "0.1.0"
