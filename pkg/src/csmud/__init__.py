"""Compressive-sensing multiuser detection for grant-free massive access.

Synthetic block-sparse system model, greedy and thresholding recovery
baselines, a block-restrictive neural detector and an evaluation harness.
"""

from .sysmodel import SystemConfig

__version__ = "0.1.0"
__all__ = ["SystemConfig", "__version__"]
