"""Mesh-to-speech cycle consistency for diffusion-based speech-driven 3D
facial animation, at desk scale."""

__version__ = "0.1.0"
