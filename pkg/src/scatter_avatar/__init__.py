"""Volumetric-scattering renderer and inverse-rendering optimizer for articulated SDF avatars."""

__version__ = "0.1.0"
