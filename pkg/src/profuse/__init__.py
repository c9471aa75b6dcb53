"""Training-free open-vocabulary semantic registration for Gaussian scenes."""

__version__ = "0.1.0"
