"""Maximum-entropy AR graphical estimation of the latent process.

The dual problem is solved directly over the stacked AR parameter
``Pc = [P_0, P_1, ..., P_n]``::

    minimise   -log det(P_0' P_0) + <T(R), Pc' Pc>
    subject to [D_j(Pc' Pc)]_{kh} = 0 for every missing edge (k, h)

An orthogonal left factor leaves ``Pc' Pc`` unchanged, so ``P_0`` is kept
lower triangular with a positive diagonal throughout.  With a complete graph
the problem is strictly convex in that parametrisation and its minimiser is
the Yule-Walker model.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.linalg

from .polymat import MatrixPolynomial, det_roots
from .spectral import (
    CovarianceSequence,
    FrequencyGrid,
    ar_spectrum,
    block_toeplitz,
    lags_from_spectrum,
)


class MinimumPhaseWarning(RuntimeWarning):
    pass


class MaxentConvergenceError(RuntimeError):
    """Solver hit its iteration cap; ``result`` holds the last iterate."""

    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True, eq=False)
class ArModel:
    """AR innovation model P_0 y(t) = -sum_{j>=1} P_j y(t-j) + w(t), cov(w) = I."""

    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim == 2:
            P = P[None]
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ValueError(f"P must have shape (n+1, l, l), got {P.shape}")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    @property
    def order(self) -> int:
        return self.P.shape[0] - 1

    @classmethod
    def from_stacked(cls, Pc: np.ndarray, l: int) -> "ArModel":
        n1 = Pc.shape[1] // l
        return cls(Pc.reshape(l, n1, l).transpose(1, 0, 2))

    def stacked(self) -> np.ndarray:
        """[P_0 P_1 ... P_n] as an l x l(n+1) matrix."""
        return np.concatenate(list(self.P), axis=1)

    def polynomial(self) -> MatrixPolynomial:
        return MatrixPolynomial(self.P)

    def p0_condition(self) -> float:
        return float(np.linalg.cond(self.P[0]))

    def normalized(self) -> "ArModel":
        """Flip row signs so that diag(P_0) is positive."""
        s = np.sign(np.diag(self.P[0]))
        s[s == 0] = 1.0
        return ArModel(s[None, :, None] * self.P)

    def roots(self) -> np.ndarray:
        return det_roots(self.polynomial())

    def is_minimum_phase(self, margin: float = 1e-8) -> bool:
        r = self.roots()
        return bool(np.all(np.abs(r) < 1.0 - margin))

    def spectrum(self, grid) -> np.ndarray:
        return ar_spectrum(self, grid)

    def cov_lags(self, n: int, grid: FrequencyGrid | None = None) -> np.ndarray:
        """Model lags R_0..R_n by quadrature of the spectrum."""
        grid = grid or FrequencyGrid.uniform(4096)
        return lags_from_spectrum(self.spectrum(grid), grid, n)


@dataclass(frozen=True)
class LatentTopology:
    """Undirected interaction graph of the latent process (1-indexed edges)."""

    dim: int
    edges: frozenset

    def __post_init__(self):
        norm = set()
        for k, h in self.edges:
            if not (1 <= k <= self.dim and 1 <= h <= self.dim):
                raise ValueError(f"edge {(k, h)} outside 1..{self.dim}")
            norm.add((max(k, h), min(k, h)))
        norm |= {(k, k) for k in range(1, self.dim + 1)}
        object.__setattr__(self, "edges", frozenset(norm))

    @classmethod
    def complete(cls, dim: int) -> "LatentTopology":
        return cls(dim, frozenset((k, h) for k in range(1, dim + 1) for h in range(1, k + 1)))

    @classmethod
    def from_pairs(cls, dim: int, pairs: Iterable) -> "LatentTopology":
        return cls(dim, frozenset(tuple(int(v) for v in p) for p in pairs))

    def lower_pairs(self) -> list[tuple[int, int]]:
        """0-indexed (k, h), k >= h, of present edges (self-loops included)."""
        return sorted((k - 1, h - 1) for k, h in self.edges)

    def missing_pairs(self) -> list[tuple[int, int]]:
        """0-indexed (k, h), k > h, of absent edges."""
        return [(k, h) for k in range(self.dim) for h in range(k)
                if (k + 1, h + 1) not in self.edges]

    def to_list(self) -> list[list[int]]:
        return [list(e) for e in sorted(self.edges)]


def _selectors(l: int, n: int, topology: LatentTopology) -> list[np.ndarray]:
    """Matrices E with <E, X> = [D_j(X)]_{kh} for each constraint.

    Order: for every missing (k, h), k > h, the entries [D_j]_{kh} for
    j = 0..n, followed by [D_j]_{hk} for j = 1..n.
    """
    L = l * (n + 1)
    out = []
    for k, h in topology.missing_pairs():
        for a, b, js in ((k, h, range(n + 1)), (h, k, range(1, n + 1))):
            for j in js:
                E = np.zeros((L, L))
                coef = 1.0 if j == 0 else 2.0
                for blk in range(n + 1 - j):
                    E[blk * l + a, (blk + j) * l + b] = coef
                out.append(E)
    return out


def dual_objective(model: ArModel, T: np.ndarray) -> float:
    """-log det(P_0' P_0) + tr(T Pc' Pc)."""
    P0 = model.P[0]
    sign, logdet = np.linalg.slogdet(P0)
    if sign == 0 or not np.isfinite(logdet):
        raise np.linalg.LinAlgError("P_0 is singular")
    Pc = model.stacked()
    T = np.asarray(T)
    if T.shape != (Pc.shape[1], Pc.shape[1]):
        raise ValueError(f"T has shape {T.shape}, expected side {Pc.shape[1]}")
    return float(-2.0 * logdet + np.trace(Pc @ T @ Pc.T))


def dual_gradient(model: ArModel, T: np.ndarray) -> np.ndarray:
    """Gradient of :func:`dual_objective` with respect to Pc (same shape)."""
    Pc = model.stacked()
    l = model.dim
    G = 2.0 * Pc @ T
    G[:, :l] -= 2.0 * np.linalg.inv(model.P[0]).T
    return G


def dual_hessian(model: ArModel, T: np.ndarray) -> np.ndarray:
    """Hessian of :func:`dual_objective` with respect to vec(Pc) (column-major)."""
    l = model.dim
    H = 2.0 * np.kron(T, np.eye(l))
    Q = np.linalg.inv(model.P[0])
    # d^2 of -2 log|det P_0| is 2 tr(Q dP Q dP)
    H4 = 2.0 * np.einsum("mi,jk->ijkm", Q, Q)
    H[: l * l, : l * l] += H4.transpose(1, 0, 3, 2).reshape(l * l, l * l)
    return H


def constraint_residuals(model: ArModel, topology: LatentTopology) -> np.ndarray:
    """Stacked [D_j(Pc' Pc)]_{kh} over missing edges; empty for a complete graph."""
    if topology.dim != model.dim:
        raise ValueError("topology and model dimensions differ")
    Pc = model.stacked()
    X = Pc.T @ Pc
    return np.array([np.sum(E * X) for E in _selectors(model.dim, model.order, topology)])


def yule_walker(lags: CovarianceSequence) -> ArModel:
    """Complete-graph maximum-entropy AR model from the block normal equations.

    y(t) = sum_j Phi_j y(t-j) + eps(t) with cov(eps) = L L'; returns
    P_0 = L^{-1} and P_j = -P_0 Phi_j.
    """
    R = lags.lags
    n, d = lags.order, lags.dim
    try:
        np.linalg.cholesky(block_toeplitz(lags))
    except np.linalg.LinAlgError as exc:
        raise ValueError("block-Toeplitz matrix of the lags is not positive definite") from exc
    if n == 0:
        Sw = R[0]
        Phi = np.zeros((0, d, d))
    else:
        Tn1 = block_toeplitz(CovarianceSequence(R[:n]))
        rhs = np.concatenate(list(R[1:]), axis=1)  # [R_1 ... R_n]
        coef = scipy.linalg.solve(Tn1, rhs.T, assume_a="pos").T
        Phi = coef.reshape(d, n, d).transpose(1, 0, 2)
        Sw = R[0] - sum(Phi[j] @ R[j + 1].T for j in range(n))
        Sw = 0.5 * (Sw + Sw.T)
    Lw = np.linalg.cholesky(Sw)
    P0 = scipy.linalg.solve_triangular(Lw, np.eye(d), lower=True)
    P = np.empty((n + 1, d, d))
    P[0] = P0
    for j in range(n):
        P[j + 1] = -P0 @ Phi[j]
    return ArModel(P)


@dataclass
class MaxentOptions:
    eps: float = 1e-12
    feas_tol: float = 1e-9
    max_iter: int = 200
    penalty_growth: float = 10.0
    alpha: float = 0.25
    beta: float = 0.5

    @classmethod
    def from_dict(cls, d: dict | None) -> "MaxentOptions":
        d = dict(d or {})
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class MaxentResult:
    model: ArModel
    converged: bool
    iterations: int
    objective: float
    decrement_sq_half: float
    feasibility: float
    trace: list = field(default_factory=list, repr=False)


def _free_index(l: int, n: int) -> np.ndarray:
    """vec(Pc) positions of the free entries: lower triangle of P_0, all of P_j."""
    idx = [c * l + i for c in range(l) for i in range(l) if i >= c]
    idx += list(range(l * l, l * l * (n + 1)))
    return np.array(idx)


def solve_maxent(lags: CovarianceSequence, topology: LatentTopology,
                 opts: MaxentOptions | None = None) -> MaxentResult:
    """Sequential equality-constrained Newton method for the dual problem.

    Each iteration linearises the quadratic edge constraints and solves the
    KKT system with the Lagrangian Hessian, regularised by tau*I (tau doubled
    from 1e-10) until it is positive definite on the constraint null space.
    Steps are globalised by backtracking on f + mu*||c||_1.
    """
    opts = opts or MaxentOptions()
    l, n = lags.dim, lags.order
    if topology.dim != l:
        raise ValueError("topology and lag dimensions differ")
    T = block_toeplitz(lags)
    try:
        np.linalg.cholesky(T)
    except np.linalg.LinAlgError as exc:
        raise ValueError("block-Toeplitz matrix of the lags is not positive definite") from exc

    sel = _selectors(l, n, topology)
    Esym = [E + E.T for E in sel]
    free = _free_index(l, n)
    I_l = np.eye(l)
    L = l * (n + 1)

    def unpack(u):
        v = np.zeros(l * L)
        v[free] = u
        return v.reshape(L, l).T  # column-major vec -> l x L

    def f_of(Pc):
        d = np.diag(Pc[:, :l])
        if np.any(d <= 0):
            return np.inf
        return float(-2.0 * np.sum(np.log(d)) + np.sum((Pc @ T) * Pc))

    def cons(Pc):
        X = Pc.T @ Pc
        c = np.array([np.sum(E * X) for E in sel])
        J = np.array([(Pc @ Es).flatten(order="F")[free] for Es in Esym]).reshape(len(sel), free.size)
        return c, J

    Pc = np.zeros((l, L))
    Pc[:, :l] = np.diag(1.0 / np.sqrt(np.diag(lags.lags[0])))
    u = Pc.flatten(order="F")[free]
    nu = np.zeros(len(sel))
    mu = 1.0
    trace = []
    converged = False
    lam2 = np.inf
    feas = 0.0
    it = 0

    for it in range(1, opts.max_iter + 1):
        Pc = unpack(u)
        model = ArModel.from_stacked(Pc, l)
        f = f_of(Pc)
        g = dual_gradient(model, T).flatten(order="F")[free]
        W = dual_hessian(model, T)
        if sel:
            c, J = cons(Pc)
            W = W + sum(v * np.kron(Es, I_l) for v, Es in zip(nu, Esym))
        else:
            c, J = np.zeros(0), np.zeros((0, free.size))
        W = W[np.ix_(free, free)]
        feas = float(np.abs(c).max()) if c.size else 0.0

        Z = scipy.linalg.null_space(J) if J.shape[0] else np.eye(free.size)
        tau = 0.0
        while True:
            Wt = W + tau * np.eye(free.size)
            try:
                np.linalg.cholesky(Z.T @ Wt @ Z)
                break
            except np.linalg.LinAlgError:
                tau = 1e-10 if tau == 0.0 else 2.0 * tau
                if tau > 1e12:
                    raise np.linalg.LinAlgError("Hessian regularisation diverged")
        nc = J.shape[0]
        K = np.block([[Wt, J.T], [J, np.zeros((nc, nc))]])
        rhs = np.concatenate([-g, -c])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        du, nu_new = sol[: free.size], sol[free.size:]
        lam2 = float(du @ Wt @ du)
        trace.append({"iter": it, "objective": f, "decrement_sq_half": lam2 / 2,
                      "feasibility": feas, "tau": tau})
        if lam2 / 2 <= opts.eps and feas <= opts.feas_tol:
            converged = True
            # one more full step inside the quadratic region costs nothing and
            # takes the iterate from ~sqrt(eps) to ~eps accuracy
            if np.isfinite(f_of(unpack(u + du))):
                u = u + du
            break

        if nc and mu < 1.1 * np.abs(nu_new).max():
            mu = max(opts.penalty_growth * mu, 2.0 * np.abs(nu_new).max())
        c1 = np.abs(c).sum()
        merit0 = f + mu * c1
        slope = float(g @ du) - mu * c1
        t = 1.0
        while True:
            Pn = unpack(u + t * du)
            fn = f_of(Pn)
            if np.isfinite(fn):
                cn = np.abs(cons(Pn)[0]).sum() if nc else 0.0
                if fn + mu * cn <= merit0 + opts.alpha * t * min(slope, 0.0):
                    break
            t *= opts.beta
            if t < 1e-16:
                break
        if t < 1e-16:
            # no progress possible at machine precision
            if feas <= opts.feas_tol and lam2 / 2 <= 1e3 * max(opts.eps, 1e-15):
                converged = True
            break
        u = u + t * du
        nu = nu_new
        trace[-1]["step_size"] = t

    Pc = unpack(u)
    model = ArModel.from_stacked(Pc, l).normalized()
    result = MaxentResult(
        model=model,
        converged=converged,
        iterations=it,
        objective=f_of(Pc),
        decrement_sq_half=lam2 / 2,
        feasibility=feas,
        trace=trace,
    )
    if not converged:
        raise MaxentConvergenceError(
            f"maximum-entropy solver did not converge in {it} iterations "
            f"(decrement^2/2={lam2 / 2:.3g}, feasibility={feas:.3g})", result)
    if not model.is_minimum_phase():
        warnings.warn("estimated AR model is not minimum phase", MinimumPhaseWarning)
    return result
