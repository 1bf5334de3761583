"""Simulation and tomography toolkit for heralded single photons measured
with a broadband CW-local-oscillator homodyne detector."""

__version__ = "0.1.0"
