"""Image-specific prototype exploration for weakly supervised localization, in NumPy."""

__version__ = "0.1.0"
