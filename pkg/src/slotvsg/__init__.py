"""Object-centric video scene graph generation with object and relation slots."""

__version__ = "0.1.0"
