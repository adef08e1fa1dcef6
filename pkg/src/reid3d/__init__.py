"""3D multi-object re-identification across paired tours."""

__version__ = "0.1.0"
