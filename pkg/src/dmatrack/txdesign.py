"""Transmit-side design: beam codebook search, digital precoding, and
self-interference handling.

The analog TX weights come from a one-dimensional search over a
near-field focusing codebook (maximizing the reflected energy through
the estimated bounce channel), the digital precoder is zero-forcing on
the estimated effective downlink channel with the power constraint met
with equality, and the digital canceller negates the analog
self-interference map exactly under perfect leakage knowledge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dma, geometry
from .channel import PropagationParams, as_matrix
from .dma import AnalogBfMatrix, MicrostripParams
from .errors import ConfigError, SingularChannelError
from .geometry import ArrayLayout, PanelSide


@dataclass(frozen=True)
class PowerBudget:
    """Power and noise constants, all in watts."""

    p_max_w: float
    gamma_w: float
    sigma_sq_ue: tuple
    sigma_sq_rx: float

    def __post_init__(self) -> None:
        if self.p_max_w <= 0 or self.gamma_w <= 0 or self.sigma_sq_rx <= 0:
            raise ValueError("power budget entries must be positive")
        if any(s <= 0 for s in self.sigma_sq_ue):
            raise ValueError("per-UE noise variances must be positive")


@dataclass(frozen=True, eq=False)
class BeamCodebook:
    """Unit-modulus phase profiles focused on a (range, elevation) grid.

    entries: (2**bits, N) complex, each element of each entry has unit
    modulus; focus_points: (2**bits, 2) of (r, theta) per entry.
    """

    entries: np.ndarray
    focus_points: np.ndarray
    bits: int

    @property
    def n_entries(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class TxDesign:
    """One block's complete transmit configuration and its audit values."""

    w_tx: AnalogBfMatrix
    w_rx: AnalogBfMatrix
    v: np.ndarray
    d: np.ndarray
    chosen_codeword: int
    residual_si_per_strip: np.ndarray
    tx_power_w: float
    si_ok: bool


def build_codebook(
    layout_tx: ArrayLayout,
    params: PropagationParams,
    bits: int,
    r_grid,
    theta_grid,
    phi: float = np.pi / 2.0,
) -> BeamCodebook:
    """Near-field focusing codebook over a (range, elevation) grid.

    Each entry holds the phase profile that adds the panel's responses to
    its focus point coherently: element (i, n) carries
    exp(+j*2*pi*d_{i,n}/lambda) with d the exact element distance. The
    grid sizes must multiply to 2**bits.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    theta_grid = np.asarray(theta_grid, dtype=float)
    if r_grid.size * theta_grid.size != 2**bits:
        raise ConfigError(
            f"codebook grid {r_grid.size}x{theta_grid.size} != 2**{bits} entries"
        )
    rr, tt = np.meshgrid(r_grid, theta_grid, indexing="ij")
    dist, _ = geometry.distance_points(rr.ravel(), tt.ravel(), phi, layout_tx)
    entries = np.exp(2j * np.pi * dist / params.wavelength)
    focus = np.column_stack([rr.ravel(), tt.ravel()])
    return BeamCodebook(entries=entries, focus_points=focus, bits=bits)


def _objectives(h_r: np.ndarray, codebook: BeamCodebook, layout: ArrayLayout) -> np.ndarray:
    """Frobenius objective of every codebook entry, shape (n_entries,)."""
    n_e = layout.n_e
    obj = np.zeros(codebook.n_entries)
    for j in range(layout.n_rf):
        block = h_r[:, j * n_e : (j + 1) * n_e]
        prod = codebook.entries[:, j * n_e : (j + 1) * n_e] @ block.T
        obj += np.sum(np.abs(prod) ** 2, axis=1)
    return obj


def codeword_block(entry: np.ndarray, layout: ArrayLayout) -> np.ndarray:
    """Place a flat N-element profile into the block-sparse (N, n_rf) pattern."""
    grid = np.asarray(entry, dtype=complex).reshape(layout.n_rf, layout.n_e)
    return dma.assemble_analog(grid, layout.side).entries


def op1_search(h_r_est, codebook: BeamCodebook, layout: ArrayLayout) -> tuple:
    """Pick the codebook entry maximizing ||H_r_est @ W_tilde||_F**2.

    Ties break toward the lowest index. Returns (index, w_tilde) with
    w_tilde the winning profile in the block-sparse (N, n_rf) pattern.
    """
    if codebook.n_entries == 0:
        raise ConfigError("empty codebook")
    h_r = as_matrix(h_r_est)
    obj = _objectives(h_r, codebook, layout)
    idx = int(np.argmax(obj))
    return idx, codeword_block(codebook.entries[idx], layout)


def finalize_tx_weights(w_tilde: np.ndarray, strips) -> AnalogBfMatrix:
    """Map a block-sparse unit-modulus profile onto constrained weights.

    Applies w = (j + w_tilde * exp(j*rho*beta)) / 2 element-wise along
    each feed line, compensating the line's propagation phase.
    """
    w_tilde = np.asarray(w_tilde, dtype=complex)
    n_rf = len(strips)
    n_e = w_tilde.shape[0] // n_rf
    entries = np.zeros_like(w_tilde)
    for j, strip in enumerate(strips):
        rows = slice(j * n_e, (j + 1) * n_e)
        entries[rows, j] = dma.map_unconstrained(
            w_tilde[rows, j], strip.rho, strip.beta
        )
    return AnalogBfMatrix(entries=entries, role=PanelSide.TX)


def broad_tx_weights(layout: ArrayLayout) -> AnalogBfMatrix:
    """All-broad TX configuration: every weight at phase parameter 0."""
    grid = np.full((layout.n_rf, layout.n_e), dma.lorentzian(0.0), dtype=complex)
    return dma.assemble_analog(grid, PanelSide.TX)


def wide_rx_weights(layout: ArrayLayout, rng: np.random.Generator) -> AnalogBfMatrix:
    """Fixed wide combine configuration: one seeded draw of constrained
    weights with phase parameters uniform on [-pi/2, pi/2], held for a
    whole run."""
    phases = rng.uniform(-dma.PHASE_LIMIT, dma.PHASE_LIMIT, size=(layout.n_rf, layout.n_e))
    return dma.assemble_analog(dma.lorentzian(phases), PanelSide.RX)


def _as_diag(p, n: int) -> np.ndarray:
    """Accept a diagonal vector or a full diagonal matrix."""
    p = np.asarray(p)
    if p.ndim == 2:
        return np.diag(p)
    if p.shape != (n,):
        raise ValueError(f"expected diagonal of length {n}")
    return p


def zf_precoder(h_eff_all: np.ndarray, p_tx_w_tx: np.ndarray, budget: PowerBudget) -> np.ndarray:
    """Zero-forcing precoder on the stacked effective channel.

    h_eff_all is (U*L, n_rf); the returned V is its pseudo-inverse scaled
    so that ||p_tx_w_tx @ V||_F**2 equals the power budget exactly.
    Raises SingularChannelError when the stacked rows are (numerically)
    dependent, naming the offending UE rows.
    """
    h = np.asarray(h_eff_all, dtype=complex)
    streams, n_rf = h.shape
    if streams > n_rf:
        raise SingularChannelError(
            f"{streams} streams exceed {n_rf} RF chains; zero-forcing infeasible"
        )
    s = np.linalg.svd(h, compute_uv=False)
    if s[-1] <= 1e-10 * s[0]:
        rank = int(np.sum(s > 1e-10 * s[0]))
        dependent = [
            row
            for row in range(streams)
            if np.linalg.matrix_rank(np.delete(h, row, axis=0)) == rank
        ]
        raise SingularChannelError(
            f"effective channel rank {rank} < {streams} streams; "
            f"dependent rows {dependent}"
        )
    v = np.linalg.pinv(h)
    scale = np.sqrt(budget.p_max_w) / np.linalg.norm(p_tx_w_tx @ v)
    return v * scale


def digital_canceller(h_si_est, p_rx, w_rx, p_tx, w_tx) -> np.ndarray:
    """Digital canceller D = -W_rx^H P_rx^H H_si_est P_tx W_tx.

    With a perfect leakage estimate the combined analog-plus-digital
    self-interference map is exactly zero.
    """
    return -analog_si_map(h_si_est, p_rx, w_rx, p_tx, w_tx)


def analog_si_map(h_si, p_rx, w_rx, p_tx, w_tx) -> np.ndarray:
    """Analog self-interference map W_rx^H P_rx^H H_si P_tx W_tx."""
    h = as_matrix(h_si)
    w_rx_e = np.asarray(getattr(w_rx, "entries", w_rx))
    w_tx_e = np.asarray(getattr(w_tx, "entries", w_tx))
    p_rx_d = _as_diag(p_rx, h.shape[0])
    p_tx_d = _as_diag(p_tx, h.shape[1])
    combiner = w_rx_e.conj().T * p_rx_d.conj()[None, :]
    return (combiner @ h) * p_tx_d[None, :] @ w_tx_e


def si_constraint_check(h_si, p_rx, w_rx, p_tx, w_tx, v, gamma_w: float) -> tuple:
    """Per-feed-line residual powers of the analog self-interference term.

    Returns (residuals, ok) where residuals[i] is the squared row norm of
    row i of W_rx^H P_rx^H H_si P_tx W_tx V (before digital cancellation)
    and ok[i] marks residuals[i] <= gamma_w.
    """
    m = analog_si_map(h_si, p_rx, w_rx, p_tx, w_tx) @ np.asarray(v, dtype=complex)
    residuals = np.sum(np.abs(m) ** 2, axis=1)
    return residuals, residuals <= gamma_w


def design_transmission(
    h_r_est,
    h_dl_est: list,
    h_si_est,
    codebook: BeamCodebook,
    layout_tx: ArrayLayout,
    strips_tx,
    p_tx,
    p_rx,
    w_rx: AnalogBfMatrix,
    budget: PowerBudget,
) -> TxDesign:
    """Single pass of the per-block transmit design.

    Codebook entries are ranked by the reflected-energy objective; the
    best one whose post-precoding analog self-interference satisfies the
    per-feed-line threshold wins. If none passes, the best-ranked feasible
    design is kept and flagged. The digital canceller always negates the
    estimated analog self-interference map of the chosen weights.
    """
    h_r = as_matrix(h_r_est)
    h_dl = [as_matrix(h) for h in h_dl_est]
    p_tx = _as_diag(p_tx, layout_tx.n_elements)
    order = np.argsort(-_objectives(h_r, codebook, layout_tx), kind="stable")

    chosen = None
    first_feasible = None
    for idx in order:
        w_tilde = codeword_block(codebook.entries[idx], layout_tx)
        w_tx = finalize_tx_weights(w_tilde, strips_tx)
        p_w = p_tx[:, None] * w_tx.entries
        h_eff = np.vstack([h @ p_w for h in h_dl])
        try:
            v = zf_precoder(h_eff, p_w, budget)
        except SingularChannelError:
            continue
        residuals, ok = si_constraint_check(h_si_est, p_rx, w_rx, p_tx, w_tx.entries, v, budget.gamma_w)
        candidate = (int(idx), w_tx, v, residuals)
        if first_feasible is None:
            first_feasible = candidate
        if bool(np.all(ok)):
            chosen = candidate + (True,)
            break
    if chosen is None:
        if first_feasible is None:
            raise SingularChannelError("no codebook entry admits a zero-forcing precoder")
        chosen = first_feasible + (False,)

    idx, w_tx, v, residuals, si_ok = chosen
    d = digital_canceller(h_si_est, p_rx, w_rx, p_tx, w_tx.entries)
    tx_power = float(np.linalg.norm(p_tx[:, None] * (w_tx.entries @ v)) ** 2)
    return TxDesign(
        w_tx=w_tx,
        w_rx=w_rx,
        v=v,
        d=d,
        chosen_codeword=idx,
        residual_si_per_strip=residuals,
        tx_power_w=tx_power,
        si_ok=si_ok,
    )
