"""Joint handwriting and named-entity recognition on record images."""

__version__ = "0.1.0"
