"""HTTP service wrapping the core package for remote or scripted use."""

from .app import create_app

__all__ = ["create_app"]
