"""Event-assisted deblurring for Gaussian-splat scene reconstruction."""

__version__ = "0.1.0"
