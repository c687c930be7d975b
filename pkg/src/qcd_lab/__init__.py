"""Quickest change detection for a Gaussian mean shift with shrinkage plug-in estimators."""

__version__ = "0.1.0"
