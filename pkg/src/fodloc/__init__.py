"""Self-supervised foreign-object-debris localization toolkit."""

__version__ = "0.1.0"
