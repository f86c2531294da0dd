"""Sequence-specific neural compression of time-varying triangle meshes."""

__version__ = "0.1.0"
