"""Spherical-wavefront geometry for a side-by-side pair of planar panels.

Both panels sit in the xz-plane. Element (i, n) of a panel lies at
x = -s * (d_p/2 + (i-1) d_rf), z = (n-1) d_e, where s = +1 for the TX
panel and s = -1 for the RX panel; the distance formulas below fold that
sign into their first squared term. A point with spherical coordinates
(r, theta, phi) sits at Cartesian (r sin(theta) cos(phi),
r sin(theta) sin(phi), r cos(theta)); theta is the polar angle from +z.

Angles are radians everywhere in this module, lengths are meters.
All functions are pure; the only shared state is a diagnostics counter.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

_counters: Counter = Counter()


def diagnostic_counts() -> dict:
    """Snapshot of the module's diagnostic counters (e.g. arcsin clamps)."""
    return dict(_counters)


def reset_diagnostics() -> None:
    _counters.clear()


class PanelSide(Enum):
    TX = "tx"
    RX = "rx"

    @property
    def x_sign(self) -> float:
        """Sign of the in-plane offset term: +1 for TX, -1 for RX."""
        return 1.0 if self is PanelSide.TX else -1.0


@dataclass(frozen=True)
class ArrayLayout:
    """Panel geometry: n_rf feed lines of n_e radiators each.

    d_e is the radiator spacing along a feed line (z direction), d_rf the
    spacing between feed lines (x direction), d_p half the panel
    separation (the innermost feed line sits d_p/2 from the origin).
    """

    n_rf: int
    n_e: int
    d_e: float
    d_rf: float
    d_p: float
    side: PanelSide = PanelSide.TX

    def __post_init__(self) -> None:
        if self.n_rf < 1 or self.n_e < 1:
            raise ValueError("n_rf and n_e must be at least 1")
        if self.d_e <= 0 or self.d_rf <= 0 or self.d_p < 0:
            raise ValueError("spacings must be positive (d_p may be 0)")

    @property
    def n_elements(self) -> int:
        return self.n_rf * self.n_e

    def strip_offsets(self) -> np.ndarray:
        """Unsigned x offsets of the feed lines, shape (n_rf,)."""
        return self.d_p / 2.0 + np.arange(self.n_rf) * self.d_rf

    def element_offsets(self) -> np.ndarray:
        """z offsets of the radiators along a feed line, shape (n_e,)."""
        return np.arange(self.n_e) * self.d_e


@dataclass(frozen=True)
class SphericalState:
    """Position of a point source/scatterer in spherical coordinates."""

    r: float
    theta: float
    phi: float

    def __post_init__(self) -> None:
        if self.r <= 0:
            raise ValueError(f"range must be positive, got {self.r}")
        if not 0.0 <= self.theta <= np.pi:
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")
        if not 0.0 <= self.phi < 2.0 * np.pi:
            raise ValueError(f"phi must lie in [0, 2*pi), got {self.phi}")

    def to_cartesian(self) -> np.ndarray:
        return spherical_to_cartesian(self.r, self.theta, self.phi)


@dataclass(frozen=True)
class UeGeometry:
    """A user terminal: an l_antennas-element line array along +z."""

    center: SphericalState
    l_antennas: int
    d_ue: float

    def __post_init__(self) -> None:
        if self.l_antennas < 1:
            raise ValueError("l_antennas must be at least 1")
        if self.d_ue <= 0:
            raise ValueError("d_ue must be positive")


def spherical_to_cartesian(r, theta, phi) -> np.ndarray:
    """(r, theta, phi) -> stacked (..., 3) Cartesian coordinates."""
    r = np.asarray(r, dtype=float)
    st = np.sin(theta)
    return np.stack(
        [r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1
    )


def cartesian_to_spherical(xyz: np.ndarray, phi_fallback: float = 0.0) -> tuple:
    """Inverse of :func:`spherical_to_cartesian` for a single point.

    For points on the z-axis the azimuth is undefined; phi_fallback is
    returned there instead.
    """
    x, y, z = float(xyz[0]), float(xyz[1]), float(xyz[2])
    r = float(np.sqrt(x * x + y * y + z * z))
    if r == 0.0:
        raise ValueError("origin has no spherical representation")
    theta = float(np.arccos(np.clip(z / r, -1.0, 1.0)))
    if x == 0.0 and y == 0.0:
        phi = phi_fallback % (2.0 * np.pi)
    else:
        phi = float(np.arctan2(y, x)) % (2.0 * np.pi)
    return r, theta, phi


def _check_indices(i: int, n: int, layout: ArrayLayout) -> None:
    if not 1 <= i <= layout.n_rf:
        raise IndexError(f"feed-line index {i} outside 1..{layout.n_rf}")
    if not 1 <= n <= layout.n_e:
        raise IndexError(f"element index {n} outside 1..{layout.n_e}")


def _distance(state: SphericalState, x_off: float, z_off: float) -> float:
    st = np.sin(state.theta)
    ax = state.r * st * np.cos(state.phi) + x_off
    ay = state.r * st * np.sin(state.phi)
    az = state.r * np.cos(state.theta) - z_off
    return float(np.sqrt(ax * ax + ay * ay + az * az))


def exact_distance_ue(
    ue_antenna: SphericalState, i: int, n: int, layout: ArrayLayout
) -> float:
    """Exact distance from a UE antenna to TX element (i, n), 1-based.

    Downlink distances are always measured to the TX panel, so the
    x-offset term enters with the + sign regardless of layout.side.
    """
    _check_indices(i, n, layout)
    x_off = layout.d_p / 2.0 + (i - 1) * layout.d_rf
    z_off = (n - 1) * layout.d_e
    return _distance(ue_antenna, x_off, z_off)


def exact_distance_target(
    target: SphericalState, i: int, n: int, layout: ArrayLayout
) -> float:
    """Exact distance from a target to element (i, n) of layout's panel.

    layout.side selects the sign of the in-plane offset term: + for the
    TX panel, - for the RX panel. TX and RX distances to the same target
    differ only through that term.
    """
    _check_indices(i, n, layout)
    x_off = layout.side.x_sign * (layout.d_p / 2.0 + (i - 1) * layout.d_rf)
    z_off = (n - 1) * layout.d_e
    return _distance(target, x_off, z_off)


def f_exact(theta, phi, x, z):
    """Normalized exact distance factor F(x, z).

    x and z are the element offsets divided by the source range (see
    :func:`normalized_offsets`); r * F(x, z) recovers the physical
    distance. F(0, 0) = 1 for every direction.
    """
    st = np.sin(theta)
    ax = st * np.cos(phi) + np.asarray(x, dtype=float)
    ay = st * np.sin(phi)
    az = np.cos(theta) - np.asarray(z, dtype=float)
    return np.sqrt(ax * ax + ay * ay + az * az)


def f_fresnel(theta, phi, x, z):
    """Six-term second-order expansion of :func:`f_exact` about (0, 0).

    Keeps the full quadratic, including the mixed x*z term, so the error
    is cubic in the normalized offsets. Valid for |x|, |z| well below 1;
    no hard bound is enforced.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    st, ct = np.sin(theta), np.cos(theta)
    sc = st * np.cos(phi)
    return (
        1.0
        + sc * x
        - ct * z
        + (1.0 - sc * sc) * x * x / 2.0
        + sc * ct * x * z
        + (1.0 - ct * ct) * z * z / 2.0
    )


def elevation_fresnel(theta, x, z, f_value):
    """Per-element elevation angle arcsin(|z - cos(theta)| / F).

    At x = z = 0 this evaluates to pi/2 - theta, i.e. the angle is
    measured from the xy-plane rather than from +z; kept as defined.
    Rounding can push the arcsin argument marginally above 1; such values
    are clamped to 1 and counted in the diagnostics.
    """
    f_value = np.asarray(f_value, dtype=float)
    if np.any(f_value <= 0):
        raise ValueError("f_value must be positive")
    ratio = np.abs(np.asarray(z, dtype=float) - np.cos(theta)) / f_value
    clipped = ratio > 1.0
    n_clipped = int(np.count_nonzero(clipped))
    if n_clipped:
        _counters["arcsin_clamped"] += n_clipped
        ratio = np.minimum(ratio, 1.0)
    return np.arcsin(ratio)


def normalized_offsets(r: float, i: int, n: int, layout: ArrayLayout) -> tuple:
    """Range-normalized offsets (x, z) of element (i, n), 1-based.

    The x offset carries layout.side's sign, so target-side geometry can
    feed :func:`f_exact` / :func:`f_fresnel` directly.
    """
    _check_indices(i, n, layout)
    x = layout.side.x_sign * (layout.d_p / 2.0 + (i - 1) * layout.d_rf) / r
    z = (n - 1) * layout.d_e / r
    return x, z


def ue_antenna_state(ue: UeGeometry, ell: int) -> SphericalState:
    """Spherical coordinates of antenna ell (1-based) of a UE line array.

    Antenna ell sits at the UE center displaced by (ell - 1) * d_ue
    along +z.
    """
    if not 1 <= ell <= ue.l_antennas:
        raise IndexError(f"antenna index {ell} outside 1..{ue.l_antennas}")
    if ell == 1:
        return ue.center
    xyz = ue.center.to_cartesian()
    xyz[2] += (ell - 1) * ue.d_ue
    r, theta, phi = cartesian_to_spherical(xyz, phi_fallback=ue.center.phi)
    return SphericalState(r=r, theta=theta, phi=phi)


def element_geometry(
    state: SphericalState, layout: ArrayLayout, approx: bool = False
) -> tuple:
    """Distances and elevations from a point to every element of a panel.

    Returns (dist, elev), both shaped (n_rf, n_e) in feed-line-major
    order. With approx=True the distances come from :func:`f_fresnel`
    and the elevations from :func:`elevation_fresnel`; otherwise both are
    exact (the elevation is then arcsin(|dz| / dist), the exact value of
    the same definition).
    """
    x = layout.side.x_sign * layout.strip_offsets()[:, None] / state.r
    z = (layout.element_offsets() / state.r)[None, :]
    if approx:
        f = f_fresnel(state.theta, state.phi, x, z)
        if np.any(f <= 0):
            raise ValueError("expansion produced a non-positive distance factor")
    else:
        f = f_exact(state.theta, state.phi, x, z)
    dist = state.r * f
    elev = elevation_fresnel(state.theta, x, z, f)
    return dist, elev


def distance_points(
    r_pts: np.ndarray,
    theta_pts: np.ndarray,
    phi: float,
    layout: ArrayLayout,
    approx: bool = False,
) -> tuple:
    """Vectorized :func:`element_geometry` over P points at fixed azimuth.

    r_pts and theta_pts are parallel arrays of length P. Returns
    (dist, elev) shaped (P, n_elements), flattened feed-line-major.
    """
    r_pts = np.asarray(r_pts, dtype=float)[:, None, None]
    theta_pts = np.asarray(theta_pts, dtype=float)[:, None, None]
    x = layout.side.x_sign * layout.strip_offsets()[None, :, None] / r_pts
    z = layout.element_offsets()[None, None, :] / r_pts
    if approx:
        f = f_fresnel(theta_pts, phi, x, z)
    else:
        f = f_exact(theta_pts, phi, x, z)
    if np.any(f <= 0):
        raise ValueError("non-positive distance factor")
    dist = r_pts * f
    elev = elevation_fresnel(theta_pts, x, z, f)
    n = layout.n_elements
    return dist.reshape(-1, n), elev.reshape(-1, n)
