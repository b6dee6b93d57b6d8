"""Recurrent stacked-hourglass keypoint localization on image sequences."""

__version__ = "0.1.0"
