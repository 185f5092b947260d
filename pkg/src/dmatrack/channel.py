"""Near-field channel synthesis for the two-panel transceiver.

Three matrices drive the link: the downlink channel from the TX panel to
each user terminal (L x N), the target-reflection channel between the
panels (N x N, a sum of rank-one bounces), and the direct leakage channel
between the node's own panels (N x N). Every entry is an attenuation
factor times a unit phasor exp(j*2*pi*d/lambda) with d the element-wise
propagation distance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import geometry
from .geometry import ArrayLayout, PanelSide, SphericalState, UeGeometry


@dataclass(frozen=True)
class PropagationParams:
    """Carrier and medium constants.

    wavelength [m]; kappa_abs: molecular absorption coefficient [1/m];
    boresight_b: exponent of the radiator gain pattern (dimensionless).
    """

    wavelength: float
    kappa_abs: float = 0.0033
    boresight_b: float = 2.0

    def __post_init__(self) -> None:
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.kappa_abs < 0 or self.boresight_b < 0:
            raise ValueError("kappa_abs and boresight_b must be non-negative")


@dataclass(frozen=True, eq=False)
class TargetSet:
    """K point scatterers, the first popcount(served_mask) being users.

    reflectivity holds the complex reflection coefficient of each target.
    """

    states: tuple
    reflectivity: np.ndarray
    served_mask: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "reflectivity", np.asarray(self.reflectivity, dtype=complex)
        )
        object.__setattr__(self, "served_mask", np.asarray(self.served_mask, dtype=bool))
        if len(self.reflectivity) != len(self.states):
            raise ValueError("reflectivity length must match states")
        if len(self.served_mask) != len(self.states):
            raise ValueError("served_mask length must match states")

    @property
    def n_targets(self) -> int:
        return len(self.states)

    @property
    def n_served(self) -> int:
        return int(np.count_nonzero(self.served_mask))


class ChannelKind(Enum):
    DL = "dl"
    REFLECTION = "reflection"
    SI = "si"


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    entries: np.ndarray
    kind: ChannelKind

    def __post_init__(self) -> None:
        if self.entries.ndim != 2:
            raise ValueError("channel entries must be a matrix")
        if self.kind in (ChannelKind.REFLECTION, ChannelKind.SI):
            if self.entries.shape[0] != self.entries.shape[1]:
                raise ValueError(f"{self.kind.value} channel must be square")

    @property
    def row_dim(self) -> int:
        return self.entries.shape[0]

    @property
    def col_dim(self) -> int:
        return self.entries.shape[1]


def as_matrix(channel) -> np.ndarray:
    """Unwrap a ChannelMatrix (or pass an ndarray through)."""
    return np.asarray(getattr(channel, "entries", channel))


def radiation_profile(theta, b):
    """Radiator gain pattern 2*(b+1)*cos(theta)**b on [-pi/2, pi/2], else 0."""
    theta = np.asarray(theta, dtype=float)
    inside = np.abs(theta) <= np.pi / 2.0
    ct = np.where(inside, np.cos(theta), 0.0)
    gain = np.where(inside, 2.0 * (b + 1.0) * ct**b, 0.0)
    if theta.ndim == 0:
        return float(gain)
    return gain


def attenuation(r, theta, params: PropagationParams):
    """Amplitude attenuation sqrt(F(theta)) * lambda/(4*pi*r) * exp(-kappa*r/2)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("range must be positive")
    amp = (
        np.sqrt(radiation_profile(theta, params.boresight_b))
        * (params.wavelength / (4.0 * np.pi * r))
        * np.exp(-params.kappa_abs * r / 2.0)
    )
    if amp.ndim == 0:
        return float(amp)
    return amp


def _phasor_entries(dist, elev, params: PropagationParams) -> np.ndarray:
    return attenuation(dist, elev, params) * np.exp(
        2j * np.pi * dist / params.wavelength
    )


def dl_channel(
    ue: UeGeometry,
    layout_tx: ArrayLayout,
    params: PropagationParams,
    approx: bool = False,
) -> ChannelMatrix:
    """Downlink channel from the TX panel to one UE, shape (L, N).

    Row ell holds the responses of UE antenna ell to every TX radiator in
    feed-line-major order. approx=True composes the matrix from the
    second-order distance expansion instead of exact distances, which is
    how estimated channels are rebuilt from estimated coordinates.
    """
    if layout_tx.side is not PanelSide.TX:
        raise ValueError("dl_channel requires a TX-side layout")
    rows = []
    for ell in range(1, ue.l_antennas + 1):
        state = geometry.ue_antenna_state(ue, ell)
        dist, elev = geometry.element_geometry(state, layout_tx, approx=approx)
        rows.append(_phasor_entries(dist, elev, params).reshape(-1))
    return ChannelMatrix(entries=np.asarray(rows), kind=ChannelKind.DL)


def array_response(
    target: SphericalState,
    layout: ArrayLayout,
    params: PropagationParams,
    approx: bool = False,
) -> np.ndarray:
    """Panel response vector to a point scatterer, shape (N,).

    layout.side fixes the sign of the in-plane offset term, so TX and RX
    responses to the same target differ.
    """
    dist, elev = geometry.element_geometry(target, layout, approx=approx)
    return _phasor_entries(dist, elev, params).reshape(-1)


def array_response_points(
    r_pts,
    theta_pts,
    phi: float,
    layout: ArrayLayout,
    params: PropagationParams,
    approx: bool = False,
) -> np.ndarray:
    """Vectorized :func:`array_response` over P points at fixed azimuth.

    Returns shape (P, N); used to tabulate steering vectors over search
    grids and inside refinement loops, so the exact path runs a fused
    formula: the gain-pattern elevation always lands in [0, pi/2], where
    cos(arcsin(x)) = sqrt(1 - x**2), letting amplitude and phase come out
    of the distances in a handful of array passes.
    """
    if approx:
        dist, elev = geometry.distance_points(r_pts, theta_pts, phi, layout, approx=True)
        return _phasor_entries(dist, elev, params)
    r = np.asarray(r_pts, dtype=float)[:, None]
    theta = np.asarray(theta_pts, dtype=float)[:, None]
    x_off = (layout.side.x_sign * layout.strip_offsets())[None, :]
    z_off = layout.element_offsets()[None, :]
    st, ct = np.sin(theta), np.cos(theta)
    ax = (r * st * np.cos(phi))[:, :, None] + x_off[:, :, None]
    ay2 = np.square(r * st * np.sin(phi))[:, :, None]
    az = (r * ct)[:, :, None] - z_off[None, None, :]
    dist3 = np.sqrt(ax * ax + ay2 + az * az)
    dist = dist3.reshape(len(r), -1)
    # sqrt(F(elev)) = sqrt(2*(b+1)) * (1 - sin(elev)**2)**(b/4)
    sin_sq = np.square(az / dist3).reshape(len(r), -1)
    b = params.boresight_b
    amp = (
        np.sqrt(2.0 * (b + 1.0))
        * (1.0 - sin_sq) ** (b / 4.0)
        * (params.wavelength / (4.0 * np.pi))
        / dist
    )
    if params.kappa_abs:
        amp = amp * np.exp(-params.kappa_abs * dist / 2.0)
    return amp * np.exp(2j * np.pi * dist / params.wavelength)


def reflection_channel(
    targets: TargetSet,
    layout_tx: ArrayLayout,
    layout_rx: ArrayLayout,
    params: PropagationParams,
    approx: bool = False,
) -> ChannelMatrix:
    """Single-bounce reflection channel sum_k beta_k * a_rx(k) a_tx(k)^H.

    Rank is at most the number of targets. An empty target set yields the
    zero matrix (with a warning).
    """
    n = layout_rx.n_elements
    entries = np.zeros((n, n), dtype=complex)
    if targets.n_targets == 0:
        warnings.warn("reflection_channel called with an empty target set")
        return ChannelMatrix(entries=entries, kind=ChannelKind.REFLECTION)
    for state, beta in zip(targets.states, targets.reflectivity):
        a_rx = array_response(state, layout_rx, params, approx=approx)
        a_tx = array_response(state, layout_tx, params, approx=approx)
        entries += beta * np.outer(a_rx, a_tx.conj())
    return ChannelMatrix(entries=entries, kind=ChannelKind.REFLECTION)


def si_channel(
    layout_tx: ArrayLayout, layout_rx: ArrayLayout, params: PropagationParams
) -> ChannelMatrix:
    """Direct leakage channel between the node's own panels, shape (N, N).

    Row (i-1)*n_e + n is RX radiator (i, n), column (i'-1)*n_e + n' is TX
    radiator (i', n'). Distances are exact Cartesian separations across
    the panel gap; the gain-pattern angle is the RX-side elevation
    arcsin(|dz| / d).
    """
    if layout_tx.side is not PanelSide.TX or layout_rx.side is not PanelSide.RX:
        raise ValueError("si_channel requires a TX layout and an RX layout")
    x_rx = layout_rx.strip_offsets()
    x_tx = layout_tx.strip_offsets()
    z_rx = layout_rx.element_offsets()
    z_tx = layout_tx.element_offsets()
    # panels sit on opposite sides of the origin, so in-plane gaps add
    dx = x_rx[:, None, None, None] + x_tx[None, None, :, None]
    dz = z_rx[None, :, None, None] - z_tx[None, None, None, :]
    dist = np.sqrt(dx * dx + dz * dz)
    elev = np.arcsin(np.abs(dz) / dist)
    n = layout_rx.n_elements
    entries = _phasor_entries(dist, elev, params).reshape(n, layout_tx.n_elements)
    return ChannelMatrix(entries=entries, kind=ChannelKind.SI)
