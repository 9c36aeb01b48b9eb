"""Fit unions of homeomorphically deformed spheres to watertight meshes."""

__version__ = "0.1.0"
