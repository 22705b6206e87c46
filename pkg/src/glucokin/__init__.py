"""Glucose estimation from reflectance video of test strips."""

__version__ = "0.1.0"
