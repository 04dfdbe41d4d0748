"""Stereo depth estimation for view synthesis at desk scale."""

__version__ = "0.1.0"
