"""Copy-move forgery detection with source/target distinguishment."""

__version__ = "0.1.0"
