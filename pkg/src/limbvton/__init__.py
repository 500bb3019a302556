"""Three-stage image-based virtual try-on: clothing warping, parsing estimation, limb-aware fusion."""

__version__ = "0.1.0"
