"""Mass-lumped, flux-upwinded P1 finite elements for incompressible two-phase flow."""

__version__ = "0.1.0"
