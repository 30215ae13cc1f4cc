"""Facial action-unit recognition with regional and temporal auxiliary tasks."""

__version__ = "0.1.0"
