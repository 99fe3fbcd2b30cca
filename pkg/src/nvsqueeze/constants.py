"""Physical constants and unit conversions.

Internal units: length in nm, time in microseconds, angular frequency in
rad/us.  Frequencies quoted in MHz are converted with the 2*pi applied here,
at the input boundary, and nowhere else.
"""

import math

TWO_PI = 2.0 * math.pi

#: Dipolar coupling constant in MHz * nm^3 (before the 2*pi).
J0_MHZ_NM3 = 52.0

#: Dipolar coupling constant in rad/us * nm^3.
J0 = TWO_PI * J0_MHZ_NM3

#: Carbon atom number density of diamond, atoms per nm^3 (3.52 g/cm^3 / 12.011 u).
DIAMOND_NUMBER_DENSITY = 176.3

#: Default layer thickness of the delta-doped NV layer, nm.
DEFAULT_THICKNESS = 7.0


def mhz_to_angular(f_mhz):
    """Convert a frequency in MHz to an angular frequency in rad/us."""
    return TWO_PI * f_mhz


def angular_to_mhz(omega):
    return omega / TWO_PI


def ppm_nm_to_areal(ppm_nm, number_density=DIAMOND_NUMBER_DENSITY):
    """Convert an areal concentration in ppm*nm to spins per nm^2.

    A delta layer with concentration c (ppm) over an effective width w (nm)
    holds c * 1e-6 * rho * w spins per nm^2, with rho the host number density.
    """
    return ppm_nm * 1e-6 * number_density


def areal_to_ppm_nm(density, number_density=DIAMOND_NUMBER_DENSITY):
    return density / (1e-6 * number_density)
