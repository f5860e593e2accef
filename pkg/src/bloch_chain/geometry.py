"""Unit-cell geometry of the periodic hard-wall channel.

Both walls belong to the single-harmonic family

    h(x) = base + (amp / 2) * (1 + cos(2 pi x / L)),

which covers the cosine billiard chain (lower: base 0, amp 1; upper: base 1,
amp A2) and the flat test channel (both amplitudes zero).  The cell spans
``-L/2 <= x <= L/2``.  Every derived quantity (slopes, curvatures, area) is
analytic, which the collision finder and the mode-matching solver rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOWER = 0
UPPER = 1

_WALLS = {"lower": LOWER, "upper": UPPER, LOWER: LOWER, UPPER: UPPER}


def _wall_index(wall) -> int:
    try:
        return _WALLS[wall]
    except KeyError:
        raise ValueError(f"unknown wall {wall!r}; expected 'lower' or 'upper'") from None


@dataclass(frozen=True)
class WaveguideProfile:
    """Periodic channel ``lower(x) <= y <= upper(x)`` with period ``L``.

    Parameters
    ----------
    lower_base, lower_amp, upper_base, upper_amp : float
        Coefficients of the two single-harmonic walls.
    L : float
        Cell length.
    A2 : float or None
        Amplitude parameter of the cosine cell, ``None`` for other channels.
    """

    lower_base: float
    lower_amp: float
    upper_base: float
    upper_amp: float
    L: float
    A2: float | None = None

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"cell length must be positive, got {self.L}")
        if not self.min_gap > 0:
            raise ValueError(f"channel pinches closed (minimum gap {self.min_gap:g})")

    @property
    def wavenumber(self) -> float:
        """Angular wavenumber ``2 pi / L`` of the wall harmonic."""
        return 2.0 * np.pi / self.L

    @property
    def coefficients(self) -> np.ndarray:
        """``[lower_base, lower_amp, upper_base, upper_amp, L]`` as a float array (kernel input)."""
        return np.array(
            [self.lower_base, self.lower_amp, self.upper_base, self.upper_amp, self.L],
            dtype=np.float64,
        )

    def _coef(self, wall):
        if _wall_index(wall) == LOWER:
            return self.lower_base, self.lower_amp
        return self.upper_base, self.upper_amp

    def height(self, wall, x):
        base, amp = self._coef(wall)
        return base + 0.5 * amp * (1.0 + np.cos(self.wavenumber * np.asarray(x, dtype=float)))

    def slope(self, wall, x):
        _, amp = self._coef(wall)
        q = self.wavenumber
        return -0.5 * amp * q * np.sin(q * np.asarray(x, dtype=float))

    def curvature(self, wall, x):
        """Second derivative of the wall height."""
        _, amp = self._coef(wall)
        q = self.wavenumber
        return -0.5 * amp * q * q * np.cos(q * np.asarray(x, dtype=float))

    def lower(self, x):
        return self.height(LOWER, x)

    def upper(self, x):
        return self.height(UPPER, x)

    def lower_slope(self, x):
        return self.slope(LOWER, x)

    def upper_slope(self, x):
        return self.slope(UPPER, x)

    def width(self, x):
        return self.upper(x) - self.lower(x)

    def interval(self, x) -> tuple[float, float]:
        """Transverse cross-section ``(lower(x), upper(x))`` at a single ``x``."""
        return float(self.lower(x)), float(self.upper(x))

    @property
    def cell_area(self) -> float:
        # the cosine term integrates to zero over one period
        return self.L * (
            self.upper_base + 0.5 * self.upper_amp - self.lower_base - 0.5 * self.lower_amp
        )

    @property
    def min_gap(self) -> float:
        # the gap is affine in cos(qx), so its extremes sit at cos = +-1
        gap_top = self.upper_base + self.upper_amp - self.lower_base - self.lower_amp
        gap_edge = self.upper_base - self.lower_base
        return min(gap_top, gap_edge)

    @property
    def y_range(self) -> tuple[float, float]:
        """Bounding transverse interval of the whole cell."""
        lo = min(self.lower_base, self.lower_base + self.lower_amp)
        hi = max(self.upper_base, self.upper_base + self.upper_amp)
        return lo, hi

    @property
    def lead_interval(self) -> tuple[float, float]:
        """Cross-section at the cell boundary ``x = +-L/2``."""
        return self.interval(0.5 * self.L)

    @property
    def lead_width(self) -> float:
        lo, hi = self.lead_interval
        return hi - lo

    @property
    def max_slope(self) -> float:
        """Largest ``|h'|`` over both walls."""
        return 0.5 * self.wavenumber * max(abs(self.lower_amp), abs(self.upper_amp))

    def scaled(self, factor: float) -> "WaveguideProfile":
        """Same shape with every length multiplied by ``factor``."""
        return WaveguideProfile(
            self.lower_base * factor,
            self.lower_amp * factor,
            self.upper_base * factor,
            self.upper_amp * factor,
            self.L * factor,
            self.A2,
        )


def cosine_profile(A2: float) -> WaveguideProfile:
    """Cosine billiard cell on ``-1 <= x <= 1``.

    ``lower(x) = (1 + cos(pi x)) / 2`` and ``upper(x) = 1 + (A2 / 2)(1 + cos(pi x))``,
    so the minimum gap ``A2`` sits at ``x = 0`` and the cell area is ``1 + A2``.
    """
    if not A2 > 0:
        raise ValueError(f"A2 must be positive (A2={A2} pinches the channel)")
    return WaveguideProfile(0.0, 1.0, 1.0, float(A2), 2.0, A2=float(A2))


def flat_profile(width: float = 1.0, L: float = 2.0) -> WaveguideProfile:
    """Straight channel ``0 <= y <= width``; the analytic oracle for both solvers."""
    return WaveguideProfile(0.0, 0.0, float(width), 0.0, float(L))


def wall_normal(profile: WaveguideProfile, wall, x) -> np.ndarray:
    """Inward unit normal of ``wall`` at ``x``.

    Lower wall: ``(-h1', 1) / norm``; upper wall: ``(h2', -1) / norm``.
    For array ``x`` the result has shape ``x.shape + (2,)``.
    """
    w = _wall_index(wall)
    s = profile.slope(w, x)
    inv = 1.0 / np.sqrt(1.0 + s * s)
    if w == LOWER:
        n = (-s * inv, inv)
    else:
        n = (s * inv, -inv)
    return np.stack(np.broadcast_arrays(*n), axis=-1)
