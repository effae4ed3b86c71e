"""Occlusion-free scene and object reconstruction by fusing several radiance fields of one place."""

__version__ = "0.1.0"
