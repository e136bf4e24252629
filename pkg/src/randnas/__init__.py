"""Random search with weight-sharing, ASHA and reproducibility tooling for cell NAS."""

__version__ = "0.1.0"
