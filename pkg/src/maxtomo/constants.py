"""Physical constants (SI, CODATA 2018) and default operating point."""

import numpy as np

EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6
C0 = 299792458.0

#: 7 T proton Larmor frequency.
DEFAULT_FREQUENCY_HZ = 297.2e6


def angular_frequency(frequency_hz):
    return 2.0 * np.pi * frequency_hz


def wavenumber(omega):
    """Free-space wavenumber k0 = omega / c."""
    return omega / C0
