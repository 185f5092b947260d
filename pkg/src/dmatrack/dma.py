"""Metasurface hardware layer: feed-line propagation and tunable weights.

Each feed line accumulates attenuation and phase along its length, and
each radiator applies a tunable complex weight constrained to the circle
w = 0.5 * (j + exp(j*phi)) with phi in [-pi/2, pi/2], i.e.
|w - j/2| = 1/2 with amplitude and phase coupled.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .geometry import ArrayLayout, PanelSide

PHASE_LIMIT = np.pi / 2.0

_counters: Counter = Counter()


def diagnostic_counts() -> dict:
    return dict(_counters)


def reset_diagnostics() -> None:
    _counters.clear()


@dataclass(frozen=True, eq=False)
class MicrostripParams:
    """Waveguide constants of one feed line.

    alpha: attenuation coefficient [1/m], beta: wavenumber [rad/m],
    rho: positions of the radiators along the line [m], non-decreasing.
    """

    alpha: float
    beta: float
    rho: np.ndarray

    def __post_init__(self) -> None:
        rho = np.asarray(self.rho, dtype=float)
        object.__setattr__(self, "rho", rho)
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if np.any(rho < 0) or np.any(np.diff(rho) < 0):
            raise ValueError("rho must be non-negative and non-decreasing")


@dataclass(frozen=True, eq=False)
class AnalogBfMatrix:
    """Block-sparse analog weight matrix, shape (n_rf * n_e, n_rf).

    Row (i-1)*n_e + n couples radiator (i, n) to feed line j; the entry
    is zero unless i == j.
    """

    entries: np.ndarray
    role: PanelSide


def default_strips(
    layout: ArrayLayout,
    wavelength: float,
    alpha: float = 0.6,
    guide_wavelength_ratio: float = 0.8,
) -> tuple:
    """Identical feed-line constants for a whole panel.

    The guided wavelength is guide_wavelength_ratio * wavelength (shorter
    than free space), radiators sit at multiples of layout.d_e.
    """
    beta = 2.0 * np.pi / (guide_wavelength_ratio * wavelength)
    rho = layout.element_offsets()
    return tuple(
        MicrostripParams(alpha=alpha, beta=beta, rho=rho) for _ in range(layout.n_rf)
    )


def propagation_diagonal(strips, layout: ArrayLayout) -> np.ndarray:
    """Diagonal of the feed propagation matrix, shape (n_elements,).

    Entry (i-1)*n_e + n is exp(-rho_{i,n} * (alpha_i + j*beta_i)).
    """
    if len(strips) != layout.n_rf:
        raise ValueError(f"expected {layout.n_rf} strips, got {len(strips)}")
    parts = []
    for strip in strips:
        if strip.rho.shape != (layout.n_e,):
            raise ValueError("strip rho length must equal layout.n_e")
        parts.append(np.exp(-strip.rho * (strip.alpha + 1j * strip.beta)))
    return np.concatenate(parts)


def propagation_matrix(strips, layout: ArrayLayout) -> np.ndarray:
    """Dense diagonal feed propagation matrix, shape (N, N)."""
    return np.diag(propagation_diagonal(strips, layout))


def _wrap_phase(phi):
    """Reflect phases into [-pi/2, pi/2], counting out-of-range inputs."""
    phi = np.asarray(phi, dtype=float)
    outside = int(np.count_nonzero((phi < -PHASE_LIMIT) | (phi > PHASE_LIMIT)))
    if outside:
        _counters["phase_wrapped"] += outside
        # fold into [-pi, pi], then reflect the outer quarters inward
        phi = np.mod(phi + np.pi, 2.0 * np.pi) - np.pi
        phi = np.where(phi > PHASE_LIMIT, np.pi - phi, phi)
        phi = np.where(phi < -PHASE_LIMIT, -np.pi - phi, phi)
    return phi


def lorentzian(phase_param):
    """Tunable radiator weight 0.5 * (j + exp(j*phi)).

    Accepts scalars or arrays. Phases outside [-pi/2, pi/2] are reflected
    back into the interval (with a diagnostic count) before evaluation.
    Every returned value satisfies |w - j/2| = 1/2.
    """
    phi = _wrap_phase(phase_param)
    w = 0.5 * (1j + np.exp(1j * phi))
    if np.isscalar(phase_param) or np.ndim(phase_param) == 0:
        return complex(w)
    return w


def assemble_analog(weights: np.ndarray, role: PanelSide) -> AnalogBfMatrix:
    """Place an (n_rf, n_e) weight grid into the block-sparse pattern."""
    weights = np.asarray(weights, dtype=complex)
    if weights.ndim != 2:
        raise ValueError("weights must be a 2-D (n_rf, n_e) grid")
    n_rf, n_e = weights.shape
    entries = np.zeros((n_rf * n_e, n_rf), dtype=complex)
    for j in range(n_rf):
        entries[j * n_e : (j + 1) * n_e, j] = weights[j]
    return AnalogBfMatrix(entries=entries, role=role)


def map_unconstrained(w_tilde, rho, beta):
    """Map unit-modulus weights onto the constrained circle.

    w = (j + w_tilde * exp(j*rho*beta)) / 2 pre-compensates the feed-line
    phase at position rho so that, after propagation, the radiated
    component carries w_tilde's phase. By construction the result lies on
    |w - j/2| = 1/2 and satisfies 2*w - j = w_tilde * exp(j*rho*beta)
    exactly.
    """
    w_tilde = np.asarray(w_tilde, dtype=complex)
    if np.any(np.abs(np.abs(w_tilde) - 1.0) > 1e-9):
        raise ValueError("w_tilde entries must have unit modulus")
    out = (1j + w_tilde * np.exp(1j * np.asarray(rho, dtype=float) * beta)) / 2.0
    if np.ndim(out) == 0:
        return complex(out)
    return out
