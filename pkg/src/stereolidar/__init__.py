"""Stereo-proposal guided LiDAR 3D object detection on a small numpy autodiff engine."""

__version__ = "0.1.0"
