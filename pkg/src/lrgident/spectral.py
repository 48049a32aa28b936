"""Covariance lags, block-Toeplitz machinery and spectra on a frequency grid.

Conventions: ``R_j = E[x(t+j) x(t)']``, the spectrum is
``Phi(theta) = sum_j R_j e^{-i j theta}`` (with ``R_{-j} = R_j'``) and lags
are recovered as ``R_k = int Phi(theta) e^{i k theta} dtheta / 2pi``.
A transfer function ``W(z^{-1})`` evaluated on the circle gives
``Phi = W(e^{i theta}) W(e^{i theta})^*``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class CovarianceSequence:
    """Lags R_0..R_n of a stationary vector process.

    ``shrink`` is the fraction of the noise variance actually removed by
    :func:`noise_compensate` (1.0 for raw estimates).
    """

    lags: np.ndarray
    shrink: float = 1.0

    def __post_init__(self):
        lags = np.array(self.lags, dtype=float)
        if lags.ndim == 2:
            lags = lags[None]
        if lags.ndim != 3 or lags.shape[1] != lags.shape[2]:
            raise ValueError(f"lags must have shape (n+1, dim, dim), got {lags.shape}")
        if not np.allclose(lags[0], lags[0].T, atol=1e-10, rtol=0):
            raise ValueError("R_0 is not symmetric")
        lags.setflags(write=False)
        object.__setattr__(self, "lags", lags)

    @property
    def dim(self) -> int:
        return self.lags.shape[1]

    @property
    def order(self) -> int:
        return self.lags.shape[0] - 1

    def toeplitz(self) -> np.ndarray:
        return block_toeplitz(self)

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(block_toeplitz(self))[0])


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if p.shape != w.shape or p.ndim != 1:
            raise ValueError("points and weights must be 1-D arrays of equal length")
        if np.any(np.diff(p) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, k: int = 2048) -> "FrequencyGrid":
        """Periodic trapezoid rule on [-pi, pi): k points, weights 2pi/k."""
        if k < 2:
            raise ValueError("need at least two grid points")
        theta = -np.pi + 2.0 * np.pi * np.arange(k) / k
        return cls(theta, np.full(k, 2.0 * np.pi / k))

    def __len__(self) -> int:
        return self.points.size

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Approximate int f(theta) dtheta (no 1/2pi) along axis 0."""
        return np.tensordot(self.weights, values, axes=([0], [0]))

    def mean(self, values: np.ndarray) -> np.ndarray:
        """Approximate int f(theta) dtheta / 2pi along axis 0."""
        return self.integrate(values) / (2.0 * np.pi)


DEFAULT_GRID_SIZE = 2048
DIAGNOSTIC_GRID_SIZE = 512


def empirical_cov_lags(data, n: int) -> CovarianceSequence:
    """Unbiased lag estimates R_j = 1/(N-j) sum_t x(t+j) x(t)', j = 0..n."""
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N = x.shape[0]
    if N <= n:
        raise ValueError(f"need more than n={n} samples, got N={N}")
    lags = np.empty((n + 1, x.shape[1], x.shape[1]))
    for j in range(n + 1):
        lags[j] = x[j:].T @ x[: N - j] / (N - j)
    lags[0] = 0.5 * (lags[0] + lags[0].T)
    return CovarianceSequence(lags)


def block_toeplitz(lags: CovarianceSequence) -> np.ndarray:
    """T(R): block (i, j) is R_{j-i} for j >= i and R_{i-j}' below."""
    R = lags.lags
    n1, d = R.shape[0], R.shape[1]
    T = np.empty((n1 * d, n1 * d))
    for i in range(n1):
        for j in range(n1):
            blk = R[j - i] if j >= i else R[i - j].T
            T[i * d:(i + 1) * d, j * d:(j + 1) * d] = blk
    return T


def noise_compensate(lags: CovarianceSequence, sigma: float, floor: float = 1e-6,
                     iters: int = 30) -> CovarianceSequence:
    """Subtract the measurement-noise variance from R_0.

    R_0 becomes R_0 - lam * sigma^2 I, with lam in (0, 1] the largest value
    (bisection) keeping min eig T(R) >= floor.  ``lam`` is returned as
    ``shrink`` on the result.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if np.linalg.eigvalsh(lags.lags[0])[0] <= 0:
        raise ValueError("R_0 is not positive definite")
    if sigma == 0:
        return replace(lags, shrink=1.0)

    base = block_toeplitz(lags)
    d = lags.dim
    I = np.eye(base.shape[0])
    s2 = sigma ** 2

    def ok(lam):
        return np.linalg.eigvalsh(base - lam * s2 * I)[0] >= floor

    if not ok(0.0):
        raise ValueError("block-Toeplitz matrix of the raw lags is below the floor")
    if ok(1.0):
        lam = 1.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
        lam = lo
    out = lags.lags.copy()
    out[0] = out[0] - lam * s2 * np.eye(d)
    return CovarianceSequence(out, shrink=lam)


def d_operator(X, m: int, n: int) -> list[np.ndarray]:
    """[D_0(X), ..., D_n(X)] for X partitioned into (n+1)^2 blocks of side m.

    D_0 = sum_h X_hh and D_j = 2 sum_h X_{h, h+j}.
    """
    X = np.asarray(X)
    if X.shape != (m * (n + 1), m * (n + 1)):
        raise ValueError(f"X of shape {X.shape} is not {m}(n+1) square with n={n}")
    blk = X.reshape(n + 1, m, n + 1, m).transpose(0, 2, 1, 3)
    out = [sum(blk[h, h] for h in range(n + 1))]
    for j in range(1, n + 1):
        out.append(2.0 * sum(blk[h, h + j] for h in range(n + 1 - j)))
    return out


def shift_quadratic(X, m: int, n: int, theta) -> np.ndarray:
    """Delta(e^{i theta}) X Delta(e^{i theta})^* evaluated directly."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    e = np.exp(1j * np.outer(theta, np.arange(n + 1)))
    blk = np.asarray(X).reshape(n + 1, m, n + 1, m)
    out = np.einsum("ta,aibj,tb->tij", e, blk, e.conj())
    return out


def pseudo_polynomial(D: Sequence[np.ndarray], theta) -> np.ndarray:
    """D_0 + 1/2 sum_j (e^{-ij theta} D_j + e^{ij theta} D_j') on a grid."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    out = np.broadcast_to(D[0], (theta.size,) + D[0].shape).astype(complex)
    for j in range(1, len(D)):
        ph = np.exp(-1j * j * theta)[:, None, None]
        out = out + 0.5 * (ph * D[j] + ph.conj() * D[j].T)
    return out


def correlogram(lags: CovarianceSequence, theta) -> np.ndarray:
    """Windowed correlogram sum_{|j|<=n} R_j e^{-i j theta}."""
    D = [lags.lags[0]] + [2.0 * r for r in lags.lags[1:]]
    return pseudo_polynomial(D, theta)


def ar_spectrum(model, grid: FrequencyGrid | np.ndarray) -> np.ndarray:
    """Phi(theta) = (P^* P)^{-1} for an AR model P(z^{-1}) on the grid."""
    theta = grid.points if isinstance(grid, FrequencyGrid) else np.asarray(grid, dtype=float)
    Pv = model.polynomial().on_circle(theta)
    cond = np.linalg.cond(Pv)
    bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e14))
    if bad.size:
        raise np.linalg.LinAlgError(
            f"P(e^{{i theta}}) is singular at theta = {theta[bad[0]]:.6g}"
        )
    Pinv = np.linalg.inv(Pv)
    Phi = Pinv @ np.swapaxes(Pinv.conj(), -1, -2)
    return 0.5 * (Phi + np.swapaxes(Phi.conj(), -1, -2))


def lags_from_spectrum(Phi: np.ndarray, grid: FrequencyGrid, n: int) -> np.ndarray:
    """R_k = int Phi e^{i k theta} dtheta/2pi for k = 0..n (real part)."""
    ph = np.exp(1j * np.outer(np.arange(n + 1), grid.points))
    R = np.einsum("kt,t,tij->kij", ph, grid.weights, Phi) / (2.0 * np.pi)
    return R.real


def function_norm(Phi: np.ndarray) -> float:
    """sup over the grid of the largest singular value."""
    return float(np.linalg.norm(Phi, ord=2, axis=(-2, -1)).max())


def coherence(Phi: np.ndarray) -> np.ndarray:
    """|Phi_kh| / sqrt(Phi_kk Phi_hh) at every grid point."""
    d = np.sqrt(np.abs(np.einsum("tii->ti", Phi)))
    return np.abs(Phi) / (d[:, :, None] * d[:, None, :])


def err_phi(est, truth: Callable[[np.ndarray], np.ndarray] | np.ndarray, topology,
            grid: FrequencyGrid) -> float:
    """Normalised integrated squared spectral error over S_1.

    S_1 holds the edges (k, h) of the latent topology with k >= h.  The
    squared difference of a complex entry is its squared modulus and the
    integral runs over dtheta (no 1/2pi).  ``est`` is an AR model or a
    precomputed spectrum array; ``truth`` a spectrum callable or array.
    """
    S1 = list(topology.lower_pairs())
    if not S1:
        raise ValueError("S_1 is empty")
    Phi_hat = est if isinstance(est, np.ndarray) else ar_spectrum(est, grid)
    Phi = truth(grid.points) if callable(truth) else np.asarray(truth)
    if Phi.shape != Phi_hat.shape:
        raise ValueError("estimated and true spectra are on different grids")
    diff = Phi_hat - Phi
    total = 0.0
    for k, h in S1:
        total += float(grid.integrate(np.abs(diff[:, k, h]) ** 2))
    return total / (len(S1) * function_norm(Phi))


@dataclass
class DplReport:
    """Outcome of the diagonal-plus-low-rank check on a system spectrum."""

    schur_residual: float
    offdiag_upsilon_m: float
    offdiag_upsilon_l: float
    rank_lambda: int
    rank_lambda_per_point: np.ndarray = field(repr=False)
    # Alternative reading: Phi_m^{-1} - I/sigma^2 is the low-rank part.
    rank_phi_m_inv_minus_scaled_identity: int = 0
    grid_size: int = 0

    def to_dict(self) -> dict:
        return {
            "schur_residual": self.schur_residual,
            "offdiag_upsilon_m": self.offdiag_upsilon_m,
            "offdiag_upsilon_l": self.offdiag_upsilon_l,
            "rank_lambda_max": self.rank_lambda,
            "rank_phi_m_inv_minus_scaled_identity": self.rank_phi_m_inv_minus_scaled_identity,
            "grid_size": self.grid_size,
        }


def _offdiag_max(M: np.ndarray) -> float:
    k = M.shape[-1]
    mask = ~np.eye(k, dtype=bool)
    return float(np.abs(M[..., mask]).max()) if k > 1 else 0.0


def _numerical_rank(M: np.ndarray, rel: float = 1e-8) -> np.ndarray:
    s = np.linalg.svd(M, compute_uv=False)
    top = s[..., :1]
    return np.sum(s > rel * np.where(top > 0, top, np.inf), axis=-1)


def dpl_diagnostic(system, grid: FrequencyGrid) -> DplReport:
    """Check the partitioned inverse of the measurement spectrum.

    Phi = M Phi_l M^* + sigma^2 I with M = [H; I].  Reports the residual of
    Phi_m^{-1} = Ups_m - Ups_lm^* Ups_l^{-1} Ups_lm, the largest off-diagonal
    magnitude of Ups_m and Ups_l, and the numerical rank of
    Lambda = Ups_lm^* Ups_l^{-1} Ups_lm.
    """
    if system.sigma <= 0:
        raise ValueError("the diagnostic needs sigma > 0")
    m, l = system.m, system.l
    theta = grid.points
    H = system.transfer_H(theta)
    Phi_l = system.latent_spectrum(theta)
    M = np.concatenate([H, np.broadcast_to(np.eye(l), (theta.size, l, l))], axis=1)
    Phi = M @ Phi_l @ np.swapaxes(M.conj(), -1, -2) + system.sigma ** 2 * np.eye(m + l)
    cond = np.linalg.cond(Phi)
    if np.any(~np.isfinite(cond)) or cond.max() > 1e15:
        raise np.linalg.LinAlgError("measurement spectrum is singular on the grid")
    U = np.linalg.inv(Phi)
    Um, Ulm, Ul = U[:, :m, :m], U[:, m:, :m], U[:, m:, m:]
    Lam = np.swapaxes(Ulm.conj(), -1, -2) @ np.linalg.solve(Ul, Ulm)
    Phi_m_inv = np.linalg.inv(Phi[:, :m, :m])
    resid = np.abs(Phi_m_inv - (Um - Lam)).max() / max(1.0, np.abs(Phi_m_inv).max())
    ranks = _numerical_rank(Lam)
    alt = _numerical_rank(Phi_m_inv - np.eye(m) / system.sigma ** 2)
    return DplReport(
        schur_residual=float(resid),
        offdiag_upsilon_m=_offdiag_max(Um),
        offdiag_upsilon_l=_offdiag_max(Ul),
        rank_lambda=int(ranks.max()),
        rank_lambda_per_point=ranks,
        rank_phi_m_inv_minus_scaled_identity=int(alt.max()),
        grid_size=theta.size,
    )


def export_spectrum_csv(path, grid: FrequencyGrid, Phi: np.ndarray,
                        entries: Iterable[tuple[int, int]] | None = None,
                        with_coherence: bool = True) -> None:
    """Write theta, Re/Im of selected entries (1-indexed labels), and coherence."""
    d = Phi.shape[-1]
    if entries is None:
        entries = [(k, h) for k in range(d) for h in range(k + 1)]
    entries = list(entries)
    coh = coherence(Phi) if with_coherence else None
    header = ["theta"]
    for k, h in entries:
        header += [f"re_{k + 1}{h + 1}", f"im_{k + 1}{h + 1}"]
        if with_coherence:
            header.append(f"coh_{k + 1}{h + 1}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, theta in enumerate(grid.points):
            row = [repr(float(theta))]
            for k, h in entries:
                row += [repr(float(Phi[t, k, h].real)), repr(float(Phi[t, k, h].imag))]
                if with_coherence:
                    row.append(repr(float(coh[t, k, h])))
            w.writerow(row)
