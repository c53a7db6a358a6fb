"""Closed-form decay constants for the localized basis error bounds.

Both constants are maxima of smooth single-harmonic expressions on
[0, pi/2], located by golden-section search; the overlap constant for the
structured quad mesh family is fixed at 9 (an interior block has (2m+1)^2
elements, which is at most 9 m^2 for m >= 1).
"""

from dataclasses import dataclass

import numpy as np

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TheoryConstants:
    spectral_gap: float   # smallest excluded local eigenvalue
    c_star: float         # tail-decay constant
    c_star_loc: float     # localization-error constant
    theta: float          # per-layer decay ratio, in (0, 1)
    overlap: int = 9


def golden_section_max(f, a, b, tol=1e-10):
    """Maximize a unimodal function on [a, b] to absolute x-tolerance tol."""
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = f(x1)
    return max(f(0.5 * (a + b)), f1, f2)


def theory_constants(spectral_gap):
    """Evaluate the decay constants for a given spectral gap."""
    if spectral_gap <= 0.0:
        raise ValueError("spectral gap must be positive")
    inv_sqrt = 1.0 / np.sqrt(spectral_gap)

    def tail(x):
        return (np.cos(x) + np.sin(x)) * (inv_sqrt * np.cos(x) + np.sin(x))

    def loc(x):
        return ((inv_sqrt + 1.0) * np.cos(x) + np.sin(x)) ** 2 \
            + (inv_sqrt * np.cos(x) + np.sin(x)) ** 2

    c_star = golden_section_max(tail, 0.0, np.pi / 2.0)
    c_star_loc = golden_section_max(loc, 0.0, np.pi / 2.0)
    theta = c_star / (c_star + 1.0)
    return TheoryConstants(spectral_gap=float(spectral_gap), c_star=float(c_star),
                           c_star_loc=float(c_star_loc), theta=float(theta))


def auto_layers(spectral_gap, H, m_max=256):
    """Smallest m >= 1 with theta^((m-1)/2) * (m+1) <= H^2 (2D rule).

    The literal rule is conservative (theta is an upper bound on the decay
    ratio), so the result is typically larger than the saturation point
    n_coarse - 1; callers clip it to the grid.
    """
    theta = theory_constants(spectral_gap).theta
    for m in range(1, m_max + 1):
        if theta ** ((m - 1) / 2.0) * (m + 1) <= H * H:
            return m
    return m_max
