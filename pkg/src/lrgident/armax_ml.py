"""Constrained maximum-likelihood estimation of the ARMAX relation y_m = A^{-1}B y_l.

The measured output obeys A(z^{-1}) zeta_m(t) = B(z^{-1}) y_l(t) + x(t) with
x(t) = A(z^{-1}) e_m(t).  Writing Theta = [A_1 .. A_q, B_0 .. B_r] and

    z(t) = [zeta_m(t-1)' .. zeta_m(t-q)', -y_l(t)' .. -y_l(t-r)']'

gives x(t) = zeta_m(t) + Theta z(t).  The criterion

    J(Theta) = log det Gamma + (1/N) sum_t x(t)' Gamma^{-1} x(t),
    Gamma = s (I + Theta D Theta'),  s = sigma^2,

is minimised by Newton's method on the linear subspace C vec(Theta) = 0 that
encodes diagonal A_k and the sparsity pattern of the B_k.  All vec operations
are column-major.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.signal import lfilter

from .polymat import MatrixPolynomial, det_roots


class IntractableSaddleError(np.linalg.LinAlgError):
    pass


class UnstableModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ThetaParams:
    """Parameters of the ARMAX relation; A_0 = I is implicit."""

    A_lags: np.ndarray  # (q, m, m)
    B_lags: np.ndarray  # (r+1, m, l)
    b_mask: np.ndarray  # (m, l) bool
    row_degrees: tuple | None = None  # ((q_1..q_m), (r_1..r_m))

    def __post_init__(self):
        A = np.array(self.A_lags, dtype=float)
        B = np.array(self.B_lags, dtype=float)
        if B.ndim != 3:
            raise ValueError("B_lags must have shape (r+1, m, l)")
        m, l = B.shape[1:]
        A = A.reshape(-1, m, m)
        mask = np.asarray(self.b_mask, dtype=bool)
        if mask.shape != (m, l):
            raise ValueError(f"b_mask shape {mask.shape} != {(m, l)}")
        off = A - A * np.eye(m)
        if off.size and np.abs(off).max() > 1e-14:
            raise ValueError("A_k must be diagonal")
        if np.any(B[:, ~mask] != 0):
            raise ValueError("B_k has nonzero entries outside b_mask")
        rd = self.row_degrees
        if rd is not None:
            qs, rs = (tuple(int(v) for v in rd[0]), tuple(int(v) for v in rd[1]))
            if len(qs) != m or len(rs) != m or max(qs) > A.shape[0] or max(rs) > B.shape[0] - 1:
                raise ValueError("row_degrees inconsistent with q, r or m")
            rd = (qs, rs)
        for arr in (A, B, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "A_lags", A)
        object.__setattr__(self, "B_lags", B)
        object.__setattr__(self, "b_mask", mask)
        object.__setattr__(self, "row_degrees", rd)

    @property
    def m(self) -> int:
        return self.B_lags.shape[1]

    @property
    def l(self) -> int:
        return self.B_lags.shape[2]

    @property
    def q(self) -> int:
        return self.A_lags.shape[0]

    @property
    def r(self) -> int:
        return self.B_lags.shape[0] - 1

    @property
    def p(self) -> int:
        return self.m * self.q + self.l * (self.r + 1)

    @classmethod
    def zeros(cls, m, l, q, r, b_mask=None, row_degrees=None) -> "ThetaParams":
        mask = np.ones((m, l), bool) if b_mask is None else b_mask
        return cls(np.zeros((q, m, m)), np.zeros((r + 1, m, l)), mask, row_degrees)

    def matrix(self) -> np.ndarray:
        """Theta = [A_1 .. A_q, B_0 .. B_r] of shape (m, p)."""
        return np.concatenate(list(self.A_lags) + list(self.B_lags), axis=1)

    def vec(self) -> np.ndarray:
        return self.matrix().flatten(order="F")

    def with_matrix(self, Th: np.ndarray) -> "ThetaParams":
        m, l, q = self.m, self.l, self.q
        Th = np.asarray(Th, dtype=float).reshape(m, self.p)
        A = Th[:, : m * q].reshape(m, q, m).transpose(1, 0, 2)
        B = Th[:, m * q:].reshape(m, self.r + 1, l).transpose(1, 0, 2)
        # clean rounding residue on structurally zero entries
        A = A * np.eye(m)
        B = B * self.b_mask
        return ThetaParams(A, B, self.b_mask, self.row_degrees)

    def with_vec(self, v: np.ndarray) -> "ThetaParams":
        return self.with_matrix(np.asarray(v).reshape((self.m, self.p), order="F"))

    def free_mask(self) -> np.ndarray:
        """Boolean (m, p) mask of entries not fixed to zero by the structure."""
        C = constraint_matrix(self.m, self.l, self.q, self.r, self.b_mask, self.row_degrees)
        fixed = np.zeros(self.m * self.p, bool)
        if C.shape[0]:
            fixed[np.argmax(C != 0, axis=1)] = True
        return ~fixed.reshape((self.m, self.p), order="F")

    def ones_init(self) -> "ThetaParams":
        """All free parameters set to 1."""
        return self.with_matrix(self.free_mask().astype(float))

    def constraint_matrix(self) -> np.ndarray:
        return constraint_matrix(self.m, self.l, self.q, self.r, self.b_mask, self.row_degrees)

    def A_poly(self) -> MatrixPolynomial:
        return MatrixPolynomial(np.concatenate([np.eye(self.m)[None], self.A_lags]))

    def B_poly(self) -> MatrixPolynomial:
        return MatrixPolynomial(self.B_lags)

    def transfer(self, theta) -> np.ndarray:
        """H(e^{i theta}) = A^{-1} B, shape (..., m, l)."""
        return np.linalg.solve(self.A_poly().on_circle(theta), self.B_poly().on_circle(theta))

    def to_dict(self) -> dict:
        return {
            "A_lags": self.A_lags.tolist(),
            "B_lags": self.B_lags.tolist(),
            "b_mask": self.b_mask.tolist(),
            "row_degrees": None if self.row_degrees is None else [list(v) for v in self.row_degrees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaParams":
        return cls(np.asarray(d["A_lags"], float), np.asarray(d["B_lags"], float),
                   np.asarray(d["b_mask"], bool), d.get("row_degrees"))


@dataclass(frozen=True, eq=False)
class RegressorSet:
    """Targets zeta_m(t) and stacked regressors z(t), plus their moment matrices."""

    zeta_m: np.ndarray  # (N, m)
    Z: np.ndarray  # (N, p)
    q: int
    r: int

    def __post_init__(self):
        object.__setattr__(self, "_Szz", self.Z.T @ self.Z)
        object.__setattr__(self, "_Szc", self.Z.T @ self.zeta_m)
        object.__setattr__(self, "_Scc", self.zeta_m.T @ self.zeta_m)

    @property
    def N(self) -> int:
        return self.zeta_m.shape[0]

    def residuals(self, Th: np.ndarray) -> np.ndarray:
        """x(t) = zeta_m(t) + Theta z(t), shape (N, m)."""
        return self.zeta_m + self.Z @ Th.T

    def moments(self, Th: np.ndarray):
        """(Sxx, Szx, Szz) with Sxx = sum x x', Szx = sum z x', Szz = sum z z'."""
        Szx = self._Szc + self._Szz @ Th.T
        Sxx = self._Scc + Th @ self._Szc + self._Szc.T @ Th.T + Th @ self._Szz @ Th.T
        return 0.5 * (Sxx + Sxx.T), Szx, self._Szz


def build_regressors(zeta_m, y_l_hat, q: int, r: int) -> RegressorSet:
    zeta_m = np.asarray(zeta_m, dtype=float)
    y = np.asarray(y_l_hat, dtype=float)
    if zeta_m.ndim == 1:
        zeta_m = zeta_m[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if zeta_m.shape[0] != y.shape[0]:
        raise ValueError(f"series lengths differ: {zeta_m.shape[0]} vs {y.shape[0]}")
    N = zeta_m.shape[0]
    blocks = []
    for k in range(1, q + 1):
        b = np.zeros_like(zeta_m)
        b[k:] = zeta_m[: N - k]
        blocks.append(b)
    for k in range(r + 1):
        b = np.zeros_like(y)
        b[k:] = -y[: N - k]
        blocks.append(b)
    Z = np.concatenate(blocks, axis=1) if blocks else np.zeros((N, 0))
    return RegressorSet(zeta_m, Z, q, r)


def _D(theta: ThetaParams) -> np.ndarray:
    return np.diag(np.r_[np.ones(theta.m * theta.q), np.zeros(theta.l * (theta.r + 1))])


def gamma(theta: ThetaParams, sigma: float) -> np.ndarray:
    """sigma^2 (I + sum_k A_k A_k')."""
    Acal = theta.matrix()[:, : theta.m * theta.q]
    return sigma ** 2 * (np.eye(theta.m) + Acal @ Acal.T)


def cost_J(theta: ThetaParams, reg: RegressorSet, sigma: float) -> float:
    G = gamma(theta, sigma)
    Sxx, _, _ = reg.moments(theta.matrix())
    c = scipy.linalg.cho_factor(G)
    return float(2.0 * np.sum(np.log(np.diag(c[0]))) + np.trace(scipy.linalg.cho_solve(c, Sxx)) / reg.N)


def _pieces(theta, reg, sigma):
    Th = theta.matrix()
    s = sigma ** 2
    D = _D(theta)
    G = np.linalg.inv(gamma(theta, sigma))
    G = 0.5 * (G + G.T)
    Sxx, Szx, Szz = reg.moments(Th)
    U = D @ Th.T  # D Theta'
    return Th, s, D, G, Sxx, Szx, Szz, U


def gradient_J(theta: ThetaParams, reg: RegressorSet, sigma: float) -> np.ndarray:
    """Gradient with respect to Theta, shape (m, p)."""
    Th, s, D, G, Sxx, Szx, Szz, U = _pieces(theta, reg, sigma)
    N = reg.N
    # dJ/dTheta (p x m) = 2 s D Theta' G - (2/N) sum_t M2(t) x(t)' G
    sum_M2x = s * U @ G @ Sxx - Szx
    dJ = 2.0 * s * U @ G - (2.0 / N) * sum_M2x @ G
    return dJ.T


def commutation_matrix(n: int, m: int) -> np.ndarray:
    """K_{n,m} with K vec(M) = vec(M') for M of shape (n, m)."""
    if n < 1 or m < 1:
        raise ValueError("dimensions must be positive")
    K = np.zeros((n * m, n * m))
    i, j = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    # vec(M)[j*n + i] = M[i, j] = vec(M')[i*m + j]
    K[(i * m + j).ravel(), (j * n + i).ravel()] = 1.0
    return K


def hessian_J(theta: ThetaParams, reg: RegressorSet, sigma: float) -> np.ndarray:
    """Symmetrised Hessian with respect to vec(Theta), side m*p.

    H = 2 H1 + (2/N) sum_t (H2(t) + H3(t)) with
        H1 = -s M1 D (x) G - s^2 K (G Theta D (x) D Theta' G)
        H2 = s K (G Theta D (x) M2 x' G + G x M2' (x) D Theta' G)
        H3 = M2 M2' (x) G + s M1 D (x) G x x' G
    where M1 = s D Theta' G Theta - I and M2(t) = s D Theta' G x(t) - z(t).
    The sums over t are formed from moment matrices.
    """
    Th, s, D, G, Sxx, Szx, Szz, U = _pieces(theta, reg, sigma)
    N, m, p = reg.N, theta.m, theta.p
    K = commutation_matrix(p, m)
    M1 = s * U @ G @ Th - np.eye(p)
    UG = U @ G
    GThD = UG.T
    sum_M2x = s * UG @ Sxx - Szx  # sum M2 x'
    sum_M2M2 = s * s * UG @ Sxx @ UG.T - s * UG @ Szx.T - s * Szx @ UG.T + Szz
    H1 = -s * np.kron(M1 @ D, G) - s * s * K @ np.kron(GThD, UG)
    H23 = (s * K @ (np.kron(GThD, sum_M2x @ G) + np.kron(G @ sum_M2x.T, UG))
           + np.kron(sum_M2M2, G) + s * np.kron(M1 @ D, G @ Sxx @ G))
    H = 2.0 * H1 + (2.0 / N) * H23
    return 0.5 * (H + H.T)


def constraint_matrix(m: int, l: int, q: int, r: int, b_mask, row_degrees=None) -> np.ndarray:
    """Rows of unit vectors; C vec(Theta) = 0 encodes the structural zeros.

    Row order: off-diagonal entries of each column of each A_k; masked-out
    entries of each B_j; then, when per-row degrees are given, the
    coefficients of row i beyond q_i (diagonal of A_k) and r_i (B_k).
    """
    b_mask = np.asarray(b_mask, bool)
    ncol = m * (m * q + l * (r + 1))
    rows = []
    for k in range(q):
        for j in range(m):
            for i in range(m):
                if i != j:
                    rows.append((k * m + j) * m + i)
    base = q * m * m
    for j in range(r + 1):
        for k in range(m):
            for h in range(l):
                if not b_mask[k, h]:
                    rows.append(base + j * l * m + h * m + k)
    if row_degrees is not None:
        qs, rs = row_degrees
        for i in range(m):
            for k in range(qs[i], q):
                rows.append((k * m + i) * m + i)
        for j in range(r + 1):
            for k in range(m):
                if j > rs[k]:
                    for h in range(l):
                        if b_mask[k, h]:
                            rows.append(base + j * l * m + h * m + k)
    C = np.zeros((len(rows), ncol))
    C[np.arange(len(rows)), rows] = 1.0
    return C


def newton_step(H: np.ndarray, g: np.ndarray, C: np.ndarray):
    """Solve [[H + tau I, C'], [C, 0]] [step; dual] = [-g; 0].

    tau is 0 when H is positive definite on null(C), otherwise the smallest
    of 1e-10, 1e-9, ... for which the reduced matrix is positive definite
    with smallest eigenvalue at least tau/2.  The margin keeps a barely
    regularised, nearly singular system from producing huge steps.
    Returns (step, dual, tau).
    """
    H = np.asarray(H, float)
    g = np.asarray(g, float).ravel()
    C = np.asarray(C, float).reshape(-1, g.size)
    nc = C.shape[0]
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
        raise IntractableSaddleError("non-finite Hessian or gradient")
    if nc and np.linalg.matrix_rank(C) < nc:
        raise np.linalg.LinAlgError("constraint matrix has dependent rows")
    Z = scipy.linalg.null_space(C) if nc else np.eye(g.size)
    if Z.shape[1] == 0:
        return np.zeros(g.size), np.zeros(nc), 0.0
    hnorm = max(np.linalg.norm(H, 2), 1.0)
    Hr = Z.T @ H @ Z
    Hr = 0.5 * (Hr + Hr.T)
    lam_min = np.linalg.eigvalsh(Hr)[0]
    tau = 0.0
    while True:
        try:
            np.linalg.cholesky(Hr + tau * np.eye(Hr.shape[0]))
            if tau == 0.0 or lam_min + tau >= 0.5 * tau:
                break
        except np.linalg.LinAlgError:
            pass
        tau = 1e-10 if tau == 0.0 else 10.0 * tau
        if tau > 1e6 * hnorm:
            raise IntractableSaddleError("Hessian regularisation exceeded 1e6 * ||H||")
    Ht = H + tau * np.eye(g.size)
    # reduced solve, then recover the multipliers
    step = -Z @ np.linalg.solve(Z.T @ Ht @ Z, Z.T @ g)
    dual = np.linalg.lstsq(C.T, -(g + Ht @ step), rcond=None)[0] if nc else np.zeros(0)
    return step, dual, tau


def newton_decrement(step: np.ndarray, H: np.ndarray) -> float:
    q = float(step @ H @ step)
    if q < -1e-12 * max(1.0, np.abs(H).max()) * float(step @ step):
        raise ArithmeticError("negative curvature along an accepted Newton step")
    return float(np.sqrt(max(q, 0.0)))


def stationarity_residual(theta: ThetaParams, reg: RegressorSet, sigma: float,
                          masked: bool = True) -> float:
    """Frobenius norm of (N s D Theta' - s D Theta' G sum x x' + sum z x') / N.

    This equals (dJ/dTheta) Gamma / 2.  With ``masked`` only the entries that
    are free under the structural constraints are kept; Gamma is diagonal for
    diagonal A, so these vanish exactly at a constrained stationary point.
    """
    Th, s, D, G, Sxx, Szx, Szz, U = _pieces(theta, reg, sigma)
    N = reg.N
    R = (N * s * U - s * U @ G @ Sxx + Szx) / N
    if masked:
        R = R * theta.free_mask().T
    return float(np.linalg.norm(R))


@dataclass
class MlOptions:
    eps: float = 1e-12
    max_iter: int = 200
    alpha: float = 0.25
    beta: float = 0.5

    @classmethod
    def from_dict(cls, d: dict | None) -> "MlOptions":
        d = dict(d or {})
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class MlResult:
    theta: ThetaParams
    converged: bool
    iterations: int
    cost: float
    decrement: float
    stationarity: float
    stationarity_init: float
    trace: list = field(default_factory=list, repr=False)

    def write_trace(self, path) -> None:
        cols = ["iter", "cost", "decrement", "step_size", "feasibility", "stationarity"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.trace:
                w.writerow({k: row.get(k, "") for k in cols})


def solve_ml(reg: RegressorSet, sigma: float, init: ThetaParams,
             opts: MlOptions | None = None) -> MlResult:
    """Equality-constrained damped Newton iteration on cost_J."""
    opts = opts or MlOptions()
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    C = init.constraint_matrix()
    v = init.vec()
    if C.shape[0] and np.abs(C @ v).max() > 1e-10:
        raise ValueError("initial parameters violate the structural constraints")
    theta = init
    J = cost_J(theta, reg, sigma)
    st0 = stationarity_residual(theta, reg, sigma)
    trace = [{"iter": 0, "cost": J, "decrement": "", "step_size": "",
              "feasibility": 0.0, "stationarity": st0}]
    converged = False
    dec = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        g = gradient_J(theta, reg, sigma).flatten(order="F")
        H = hessian_J(theta, reg, sigma)
        step, _, tau = newton_step(H, g, C)
        dec = newton_decrement(step, H + tau * np.eye(H.shape[0]))
        if dec ** 2 / 2 <= opts.eps:
            converged = True
            trace[-1]["decrement"] = dec
            break
        slope = float(g @ step)
        t = 1.0
        while True:
            cand = theta.with_vec(v + t * step)
            Jc = cost_J(cand, reg, sigma)
            if Jc <= J + opts.alpha * t * slope:
                break
            t *= opts.beta
            if t < 1e-16:
                break
        if t < 1e-16:
            break
        theta, J = cand, Jc
        v = theta.vec()
        feas = float(np.abs(C @ v).max()) if C.shape[0] else 0.0
        trace.append({"iter": it, "cost": J, "decrement": dec, "step_size": t,
                      "feasibility": feas, "stationarity": stationarity_residual(theta, reg, sigma)})
    return MlResult(
        theta=theta,
        converged=converged,
        iterations=it,
        cost=J,
        decrement=float(dec),
        stationarity=stationarity_residual(theta, reg, sigma),
        stationarity_init=st0,
        trace=trace,
    )


@dataclass
class IdentifiabilityVerdict:
    identifiable: bool
    mode: str
    certificate: dict

    def __bool__(self) -> bool:
        return self.identifiable


def _rank(M: np.ndarray, rtol: float = 1e-8) -> int:
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv > rtol * max(1.0, sv.max() if sv.size else 0.0)))


def check_identifiability(A: MatrixPolynomial, B: MatrixPolynomial, per_row: bool = False,
                          row_degrees=None, tol: float = 1e-8) -> IdentifiabilityVerdict:
    """Left-coprimeness and leading-coefficient rank test for (A, B).

    Joint mode tests rank [A_q B_r] = m and rank [A(z0) B(z0)] = m at every
    root z0 of det A(z^{-1}).  Per-row mode (diagonal A) applies the scalar
    test to each row with its own degrees; if ``row_degrees`` is None they are
    read off the last nonzero coefficients.
    """
    m = A.rows
    if A.cols != m or B.rows != m:
        raise ValueError("A must be m x m and B must have m rows")
    if np.abs(A.coeffs[0] - np.eye(m)).max() > 1e-12:
        raise ValueError("A must be monic (A_0 = I)")
    if not per_row:
        lead = np.concatenate([A.coeffs[-1], B.coeffs[-1]], axis=1)
        if _rank(lead, tol) < m:
            return IdentifiabilityVerdict(False, "joint", {
                "reason": "leading coefficient rank deficient",
                "rank": _rank(lead, tol), "q": A.degree, "r": B.degree})
        for z0 in det_roots(A):
            M = np.concatenate([A.at(z0), B.at(z0)], axis=1)
            if _rank(M, tol) < m:
                return IdentifiabilityVerdict(False, "joint", {
                    "reason": "common left factor", "root": complex(z0), "rank": _rank(M, tol)})
        return IdentifiabilityVerdict(True, "joint", {})

    off = A.coeffs - A.coeffs * np.eye(m)
    if np.abs(off).max() > 1e-14:
        raise ValueError("per-row mode requires diagonal A")
    det_roots(A)  # raises on an identically singular determinant
    for i in range(m):
        a = A.coeffs[:, i, i]
        b = B.coeffs[:, i, :]
        if row_degrees is not None:
            qi, ri = int(row_degrees[0][i]), int(row_degrees[1][i])
        else:
            nz_a = np.flatnonzero(np.abs(a) > 0)
            nz_b = np.flatnonzero(np.abs(b).max(axis=1) > 0)
            qi = int(nz_a[-1])
            ri = int(nz_b[-1]) if nz_b.size else 0
        if ri >= b.shape[0] or qi >= a.size:
            raise ValueError("row degree exceeds the declared polynomial degree")
        if abs(a[qi]) <= tol and np.abs(b[ri]).max() <= tol:
            return IdentifiabilityVerdict(False, "per_row", {
                "reason": "leading pair vanishes", "row": i + 1, "q": qi, "r": ri})
        row = MatrixPolynomial(b[: ri + 1, None, :])
        roots = det_roots(MatrixPolynomial.scalar(a[: qi + 1])) if qi > 0 else []
        scale = max(1.0, np.abs(b).max())
        for z0 in roots:
            if np.abs(row.at(z0)).max() <= tol * scale:
                return IdentifiabilityVerdict(False, "per_row", {
                    "reason": "common factor", "row": i + 1, "root": complex(z0)})
    return IdentifiabilityVerdict(True, "per_row", {})


def reconstruct_ym(theta: ThetaParams, y_l_hat, check_stability: bool = True) -> np.ndarray:
    """y_m(t) = -sum_k A_k y_m(t-k) + sum_k B_k y_l(t-k), zero initial conditions."""
    y = np.asarray(y_l_hat, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != theta.l:
        raise ValueError(f"input has {y.shape[1]} channels, expected {theta.l}")
    if check_stability:
        roots = det_roots(theta.A_poly())
        bad = roots[np.abs(roots) >= 1.0]
        if bad.size:
            raise UnstableModelError(f"A(z^-1) has roots on or outside the unit circle: {bad}")
    out = np.zeros((y.shape[0], theta.m))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(theta.m):
            a = np.r_[1.0, theta.A_lags[:, i, i]]
            for h in range(theta.l):
                if theta.b_mask[i, h]:
                    out[:, i] += lfilter(theta.B_lags[:, i, h], a, y[:, h])
    return out


def ls_baseline(zeta_m, driver, q: int, r: int, b_mask, row_degrees=None) -> ThetaParams:
    """Row-wise least squares of zeta_m(t) on -z(t) with diagonal A and masked B.

    Only t > max(q, r) enters, so data that do not start from rest are fitted
    without the zero-padding error of the first few regressors.
    """
    reg = build_regressors(zeta_m, driver, q, r)
    m = reg.zeta_m.shape[1]
    l = np.asarray(driver).reshape(reg.N, -1).shape[1]
    template = ThetaParams.zeros(m, l, q, r, b_mask, row_degrees)
    free = template.free_mask()
    Th = np.zeros((m, template.p))
    # rows whose regressors would need samples before t = 1 are left out
    t0 = max(q, r)
    if reg.N - t0 < 1:
        raise ValueError("series too short for the requested degrees")
    for i in range(m):
        cols = np.flatnonzero(free[i])
        X = -reg.Z[t0:, cols]
        if cols.size == 0:
            continue
        if np.linalg.matrix_rank(X) < cols.size:
            raise np.linalg.LinAlgError(f"singular normal equations for output row {i + 1}")
        Th[i, cols] = np.linalg.lstsq(X, reg.zeta_m[t0:, i], rcond=None)[0]
    return template.with_matrix(Th)
