"""Toolkit for localizing adversarial susceptibility in small convnets.

Trains miniature classifiers conventionally and adversarially, selectively
reinitializes and retrains network segments, evaluates robustness under
L-infinity attacks, and compares clean-vs-adversarial feature distributions.
"""

__version__ = "0.1.0"
