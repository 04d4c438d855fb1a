"""Point-source identification for advection-diffusion equations from boundary data."""

__version__ = "0.1.0"
