"""Open-set category discovery with parts routing and feature-space outliers."""

__version__ = "0.1.0"
