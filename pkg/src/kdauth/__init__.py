"""Free-text keystroke dynamics authentication with KDI/KDS features and a numpy neural engine."""

__version__ = "0.1.0"
