"""Policy evaluation for diffusions through martingale conditions."""

__version__ = "0.1.0"
