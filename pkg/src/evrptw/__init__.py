"""Curriculum-trained neural routing for electric vehicles with time windows."""

__version__ = "0.1.0"
