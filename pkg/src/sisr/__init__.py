"""Salient-regions-guided report generation at desk scale."""

from .config import RunConfig, large_preset

__all__ = ["RunConfig", "large_preset"]
__version__ = "0.1.0"
