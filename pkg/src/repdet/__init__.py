"""Re-parameterizable anchor-free detector kit."""

__version__ = "0.1.0"
