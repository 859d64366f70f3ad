"""Spectral-transformer classification of Raman-like spectra.

Subpackages: core (types and I/O), preprocess, noisemix, nn (autodiff),
model (the ST architecture), train, metrics, maps, synth, cli.
"""

__version__ = "0.1.0"
