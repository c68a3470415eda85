"""Spectra and transport exponents of Sturmian Schrodinger operators.

Submodules:
    contfrac   exact continued-fraction arithmetic and Gauss-measure sampling
    tracemap   trace recursion, Fricke invariant, escape criterion
    bands      spectral generating band hierarchy
    transport  transport-exponent estimators and closed-form constants
    dynamics   direct wavepacket evolution, moments, Abel averages
    cli        command-line front end
"""

from . import bands, contfrac, dynamics, tracemap, transport  # noqa: F401
from .contfrac import FrequencySpec  # noqa: F401

__version__ = "0.1.0"
