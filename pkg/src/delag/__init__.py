"""Daily gap-free land-surface-temperature reconstruction.

Stage one fits a per-pixel enhanced annual temperature cycle (eATC) by Adam on
an L1 loss and keeps a snapshot ensemble; stage two models each day's residual
surface with a Gaussian process over pixel features.
"""

__version__ = "0.1.0"
