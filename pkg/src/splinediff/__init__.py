"""Desk-scale diffusion-model estimation laboratory.

Spline ground-truth densities, an exact diffused-basis score oracle,
denoising score matching, backward-SDE sampling with exact Gaussian steps,
distribution distances with a Girsanov bound, and constructive sparse ReLU
approximators with size ledgers and error certificates.
"""

__version__ = "0.1.0"
