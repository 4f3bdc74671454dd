"""Sparse l0 adversarial attacks on small numpy classifiers, with dense baselines and evaluation tools."""

__version__ = "0.1.0"
