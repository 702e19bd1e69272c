"""Hessian and gradient alignment across training domains for a classifier head."""

__version__ = "0.1.0"
