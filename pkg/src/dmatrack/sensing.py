"""Target estimation at the receive side: batch subspace initialization,
per-snapshot deflation tracking, two-dimensional spectrum search, peak
picking, and position scoring.

Snapshots live in the RF-chain domain (dimension n_rf), so steering
vectors are the panel responses pushed through the fixed combiner. The
tracked signal subspace and its eigenvalue estimates are value-semantic:
updates return new states and never mutate their inputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .geometry import SphericalState, spherical_to_cartesian

EIGVAL_FLOOR = 1e-12
SPECTRUM_FLOOR = 1e-12
REORTH_PERIOD = 50

_counters: Counter = Counter()


def diagnostic_counts() -> dict:
    return dict(_counters)


def reset_diagnostics() -> None:
    _counters.clear()


@dataclass(frozen=True, eq=False)
class SubspaceState:
    """Tracked signal subspace: basis columns w_k with eigenvalue
    estimates d_k and an exponential forgetting factor."""

    basis: np.ndarray
    eigvals: np.ndarray
    forget: float
    snapshots_seen: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.forget <= 1.0:
            raise ValueError("forget must lie in (0, 1]")
        n_rf, k = self.basis.shape
        if k > n_rf - 1:
            raise ValueError("subspace dimension must leave a noise subspace")
        if self.eigvals.shape != (k,) or np.any(self.eigvals < 0):
            raise ValueError("eigvals must be k non-negative reals")

    @property
    def k(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True, eq=False)
class SpectrumGrid:
    """Search-spectrum values over a (range, elevation) grid at fixed
    azimuth. values[i, j] belongs to (r_axis[i], theta_axis[j])."""

    r_axis: np.ndarray
    theta_axis: np.ndarray
    values: np.ndarray
    phi_fixed: float

    def __post_init__(self) -> None:
        if np.any(np.diff(self.r_axis) <= 0) or np.any(np.diff(self.theta_axis) <= 0):
            raise ValueError("grid axes must be strictly increasing")
        if self.values.shape != (len(self.r_axis), len(self.theta_axis)):
            raise ValueError("values shape must match the axes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrum values must be finite")


@dataclass(frozen=True)
class TrackEstimate:
    """One estimated target, associated to a ground-truth index."""

    r: float
    theta: float
    phi: float
    truth_index: int
    position_error: float
    missed: bool = False


def sample_covariance(snapshots) -> np.ndarray:
    """(1/T) * sum_t y_t y_t^H over a list or (T, n) array of snapshots."""
    y = np.asarray(snapshots, dtype=complex)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[0] == 0:
        raise ValueError("need at least one snapshot")
    return (y.conj().T @ y) / y.shape[0]


def music_init(r_cov: np.ndarray, k: int, forget: float = 0.98) -> SubspaceState:
    """Batch initialization: top-k eigenpairs of a Hermitian covariance."""
    r_cov = np.asarray(r_cov, dtype=complex)
    n_rf = r_cov.shape[0]
    if k >= n_rf:
        raise ConfigError(f"k={k} leaves no noise subspace in dimension {n_rf}")
    vals, vecs = np.linalg.eigh(r_cov)
    order = np.argsort(vals)[::-1][:k]
    return SubspaceState(
        basis=vecs[:, order],
        eigvals=np.maximum(vals[order].real, 0.0),
        forget=forget,
        snapshots_seen=0,
    )


def reorthonormalize(state: SubspaceState) -> SubspaceState:
    """Stabilized Gram-Schmidt pass over the basis columns."""
    basis = state.basis.copy()
    for k in range(basis.shape[1]):
        for j in range(k):
            basis[:, k] -= (basis[:, j].conj() @ basis[:, k]) * basis[:, j]
        norm = np.linalg.norm(basis[:, k])
        if norm > 0:
            basis[:, k] /= norm
    return replace(state, basis=basis)


def pastd_update(
    state: SubspaceState, y: np.ndarray, reorth_period: int = REORTH_PERIOD
) -> SubspaceState:
    """One deflation-recursion step on a new snapshot.

    For each tracked pair (w_k, d_k) in order:
        a   = w_k^H x
        d_k = forget * d_k + |a|**2
        w_k = w_k + (x - w_k a) * conj(a) / d_k
        x   = x - w_k a      (deflation with the updated w_k)
    The input state is not mutated. Every reorth_period snapshots the
    basis is re-orthonormalized to keep the noise projector well defined.
    """
    x = np.asarray(y, dtype=complex).copy()
    basis = state.basis.copy()
    eigvals = state.eigvals.copy()
    for k in range(state.k):
        w = basis[:, k]
        a = complex(w.conj() @ x)
        d_new = state.forget * eigvals[k] + abs(a) ** 2
        eigvals[k] = d_new
        if d_new < EIGVAL_FLOOR:
            _counters["deflation_skipped"] += 1
            continue
        w = w + (x - w * a) * (np.conj(a) / d_new)
        basis[:, k] = w
        x = x - w * a
    new = SubspaceState(
        basis=basis,
        eigvals=eigvals,
        forget=state.forget,
        snapshots_seen=state.snapshots_seen + 1,
    )
    if reorth_period and new.snapshots_seen % reorth_period == 0:
        new = reorthonormalize(new)
    return new


def music_spectrum(
    state: SubspaceState,
    r_axis,
    theta_axis,
    steering=None,
    phi_fixed: float = np.pi / 2.0,
    steering_table: np.ndarray | None = None,
) -> SpectrumGrid:
    """Noise-projector spectrum 1 / ||(I - U U^H) b(r, theta)||**2.

    b is the unit-normalized effective steering vector; grid points whose
    raw steering vector has zero norm get value 0 (with a diagnostic
    count). Either a per-point callable steering(r, theta, phi) -> (n_rf,)
    or a precomputed steering_table of shape (len(r), len(theta), n_rf)
    may be supplied.
    """
    r_axis = np.asarray(r_axis, dtype=float)
    theta_axis = np.asarray(theta_axis, dtype=float)
    if steering_table is not None:
        table = np.asarray(steering_table, dtype=complex).reshape(
            len(r_axis) * len(theta_axis), -1
        )
    else:
        if steering is None:
            raise ValueError("need a steering callable or a steering_table")
        table = np.array(
            [
                steering(r, t, phi_fixed)
                for r in r_axis
                for t in theta_axis
            ],
            dtype=complex,
        )
    norms = np.linalg.norm(table, axis=1)
    zero = norms == 0.0
    if np.any(zero):
        _counters["zero_steering"] += int(np.count_nonzero(zero))
        norms = np.where(zero, 1.0, norms)
    b = table / norms[:, None]
    # orthonormalize a copy of the basis so the projector is idempotent
    q, _ = np.linalg.qr(state.basis)
    resid = b - (b @ q.conj()) @ q.T
    denom = np.sum(np.abs(resid) ** 2, axis=1)
    values = 1.0 / np.maximum(denom, SPECTRUM_FLOOR)
    values = np.where(zero, 0.0, values)
    return SpectrumGrid(
        r_axis=r_axis,
        theta_axis=theta_axis,
        values=values.reshape(len(r_axis), len(theta_axis)),
        phi_fixed=phi_fixed,
    )


def _quadratic_offset(f_minus: float, f_0: float, f_plus: float) -> float:
    """Sub-cell vertex offset of the parabola through three samples."""
    denom = f_minus - 2.0 * f_0 + f_plus
    if denom >= 0.0:
        return 0.0
    return float(np.clip((f_minus - f_plus) / (2.0 * denom), -0.5, 0.5))


def peak_pick(spectrum: SpectrumGrid, k: int) -> list:
    """The k strongest local maxima, each refined by one quadratic
    interpolation step per axis.

    Local maxima use the 8-neighborhood; equal-valued peaks order by
    (range index, elevation index). When fewer than k local maxima exist,
    the remaining picks come from the global value ranking (counted in
    the diagnostics).
    """
    v = spectrum.values
    n_r, n_t = v.shape
    padded = np.full((n_r + 2, n_t + 2), -np.inf)
    padded[1:-1, 1:-1] = v
    is_max = np.ones_like(v, dtype=bool)
    for dr in (-1, 0, 1):
        for dt in (-1, 0, 1):
            if dr == 0 and dt == 0:
                continue
            is_max &= v >= padded[1 + dr : 1 + dr + n_r, 1 + dt : 1 + dt + n_t]

    def ranked(mask):
        idx = np.argwhere(mask)
        if len(idx) == 0:
            return []
        vals = v[idx[:, 0], idx[:, 1]]
        order = np.lexsort((idx[:, 1], idx[:, 0], -vals))
        return [tuple(idx[i]) for i in order]

    cells = ranked(is_max)
    if len(cells) < k:
        _counters["peaks_padded"] += k - len(cells)
        rest = [c for c in ranked(~is_max)]
        cells = cells + rest
    cells = cells[:k]

    dr_step = spectrum.r_axis[1] - spectrum.r_axis[0] if n_r > 1 else 0.0
    dt_step = spectrum.theta_axis[1] - spectrum.theta_axis[0] if n_t > 1 else 0.0
    peaks = []
    for ir, it in cells:
        r_hat = spectrum.r_axis[ir]
        t_hat = spectrum.theta_axis[it]
        if 0 < ir < n_r - 1:
            r_hat += dr_step * _quadratic_offset(v[ir - 1, it], v[ir, it], v[ir + 1, it])
        if 0 < it < n_t - 1:
            t_hat += dt_step * _quadratic_offset(v[ir, it - 1], v[ir, it], v[ir, it + 1])
        peaks.append((float(r_hat), float(t_hat)))
    return peaks


def _to_rtp(estimate) -> tuple:
    if isinstance(estimate, SphericalState):
        return estimate.r, estimate.theta, estimate.phi
    return tuple(float(c) for c in estimate)


def associate_and_rmse(estimates, truths, pad_error: float | None = None) -> tuple:
    """Greedy nearest-neighbor assignment and the Cartesian position RMSE.

    estimates are (r, theta, phi) triples or SphericalState; truths are
    SphericalState. Assignment repeatedly takes the globally closest
    (estimate, truth) pair, so it is invariant to the estimate order.
    Missing estimates (fewer than truths) are padded with pad_error
    (default: twice the largest truth range) and flagged.
    """
    est = [_to_rtp(e) for e in estimates]
    n_true = len(truths)
    if pad_error is None:
        pad_error = 2.0 * max(t.r for t in truths) if n_true else 0.0
    est_xyz = np.array(
        [spherical_to_cartesian(r, t, p) for r, t, p in est], dtype=float
    ).reshape(len(est), 3)
    true_xyz = np.array([t.to_cartesian() for t in truths], dtype=float).reshape(
        n_true, 3
    )
    dist = np.linalg.norm(est_xyz[:, None, :] - true_xyz[None, :, :], axis=2)

    tracks = []
    errors = []
    free_e = set(range(len(est)))
    free_t = set(range(n_true))
    while free_e and free_t:
        pairs = [(dist[e, t], e, t) for e in sorted(free_e) for t in sorted(free_t)]
        _, e, t = min(pairs)
        free_e.discard(e)
        free_t.discard(t)
        err = float(dist[e, t])
        tracks.append(
            TrackEstimate(
                r=est[e][0], theta=est[e][1], phi=est[e][2],
                truth_index=t, position_error=err,
            )
        )
        errors.append(err)
    for t in sorted(free_t):
        truth = truths[t]
        tracks.append(
            TrackEstimate(
                r=truth.r, theta=truth.theta, phi=truth.phi,
                truth_index=t, position_error=float(pad_error), missed=True,
            )
        )
        errors.append(float(pad_error))
    rmse = float(np.sqrt(np.mean(np.square(errors)))) if errors else 0.0
    return tracks, rmse


def subspace_affinity(basis_a: np.ndarray, basis_b: np.ndarray) -> float:
    """Mean principal-angle cosine between two subspaces (1 = identical)."""
    qa, _ = np.linalg.qr(np.asarray(basis_a, dtype=complex))
    qb, _ = np.linalg.qr(np.asarray(basis_b, dtype=complex))
    sv = np.linalg.svd(qa.conj().T @ qb, compute_uv=False)
    return float(np.mean(sv))
