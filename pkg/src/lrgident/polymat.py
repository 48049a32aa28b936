"""Matrix polynomials in the backward shift z^{-1}.

A :class:`MatrixPolynomial` stores ``coeffs[k]`` as the coefficient of
``z^{-k}``.  Degrees are declared and never trimmed, so a zero trailing
coefficient stays part of the object.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

UNIT_CIRCLE_TOL = 1e-12


class SingularPolynomialError(ValueError):
    """Raised when det p(z^{-1}) vanishes identically."""


@dataclass(frozen=True, eq=False)
class MatrixPolynomial:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3 or c.shape[0] < 1:
            raise ValueError(f"coeffs must have shape (degree+1, rows, cols), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def rows(self) -> int:
        return self.coeffs.shape[1]

    @property
    def cols(self) -> int:
        return self.coeffs.shape[2]

    @property
    def shape(self):
        return self.coeffs.shape[1:]

    @classmethod
    def identity(cls, n: int) -> "MatrixPolynomial":
        return cls(np.eye(n)[None])

    @classmethod
    def zeros(cls, rows: int, cols: int, degree: int = 0) -> "MatrixPolynomial":
        return cls(np.zeros((degree + 1, rows, cols)))

    @classmethod
    def scalar(cls, coeffs: Sequence[float]) -> "MatrixPolynomial":
        return cls(np.asarray(coeffs, dtype=float).reshape(-1, 1, 1))

    def padded(self, degree: int) -> "MatrixPolynomial":
        """Same polynomial with the declared degree raised to ``degree``."""
        if degree < self.degree:
            raise ValueError("cannot lower the declared degree")
        c = np.zeros((degree + 1,) + self.shape)
        c[: self.degree + 1] = self.coeffs
        return MatrixPolynomial(c)

    def at(self, z) -> np.ndarray:
        """Evaluate sum_k coeffs[k] z^{-k} at arbitrary (nonzero) complex ``z``.

        ``z`` may be an array; the result then has shape ``z.shape + (rows, cols)``.
        """
        z = np.asarray(z, dtype=complex)
        w = 1.0 / z
        powers = w[..., None] ** np.arange(self.degree + 1)
        return np.tensordot(powers, self.coeffs, axes=([-1], [0]))

    def on_circle(self, theta) -> np.ndarray:
        """Evaluate at z = e^{i theta} (vectorised over ``theta``)."""
        theta = np.asarray(theta, dtype=float)
        powers = np.exp(-1j * theta[..., None] * np.arange(self.degree + 1))
        return np.tensordot(powers, self.coeffs, axes=([-1], [0]))

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "degree": self.degree,
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixPolynomial":
        c = np.asarray(d["coeffs"], dtype=float)
        rows, cols, degree = int(d["rows"]), int(d["cols"]), int(d["degree"])
        if c.shape != (degree + 1, rows, cols):
            raise ValueError(
                f"coeffs shape {c.shape} does not match declared "
                f"(degree+1, rows, cols) = {(degree + 1, rows, cols)}"
            )
        return cls(c)

    def __matmul__(self, other: "MatrixPolynomial") -> "MatrixPolynomial":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"MatrixPolynomial(rows={self.rows}, cols={self.cols}, degree={self.degree})"


def eval(p: MatrixPolynomial, z: complex) -> np.ndarray:  # noqa: A001
    """Value of ``p`` at a point ``z`` on the unit circle."""
    if abs(abs(z) - 1.0) > UNIT_CIRCLE_TOL:
        raise ValueError(f"|z| = {abs(z)!r} is off the unit circle")
    return p.at(z)


def mul(p: MatrixPolynomial, q: MatrixPolynomial) -> MatrixPolynomial:
    """Product p(z^{-1}) q(z^{-1}) by coefficient convolution."""
    if p.cols != q.rows:
        raise ValueError(f"dimension mismatch: {p.shape} times {q.shape}")
    out = np.zeros((p.degree + q.degree + 1, p.rows, q.cols))
    for i, a in enumerate(p.coeffs):
        for j, b in enumerate(q.coeffs):
            out[i + j] += a @ b
    return MatrixPolynomial(out)


def para_hermitian(p: MatrixPolynomial) -> Callable[[float], np.ndarray]:
    """Return theta -> p(e^{i theta})^* p(e^{i theta})."""

    def value(theta):
        v = p.on_circle(theta)
        return np.swapaxes(v.conj(), -1, -2) @ v

    return value


def det_coefficients(p: MatrixPolynomial) -> np.ndarray:
    """Coefficients d_k of det p(w) = sum_k d_k w^k, w = z^{-1}.

    Obtained by sampling the determinant at degree*rows+1 roots of unity and
    inverting the DFT, which is exact for a polynomial of that degree.
    """
    if p.rows != p.cols:
        raise ValueError("determinant requires a square polynomial matrix")
    n = p.degree * p.rows + 1
    w = np.exp(2j * np.pi * np.arange(n) / n)
    vals = np.linalg.det(p.at(1.0 / w))
    return (np.fft.fft(vals) / n).real


def det_roots(p: MatrixPolynomial, tol: float = 1e-12) -> np.ndarray:
    """Roots z of det p(z^{-1}), multiplicities kept.

    Spurious roots at z = 0 caused by a zero-padded trailing coefficient are
    dropped; the returned array is sorted by decreasing modulus.
    """
    d = det_coefficients(p)
    scale = np.abs(d).max()
    if scale == 0.0 or not np.isfinite(scale):
        raise SingularPolynomialError("det p(z^{-1}) is identically zero")
    d = np.where(np.abs(d) <= tol * scale, 0.0, d)
    nz = np.flatnonzero(d)
    # z^D det p(1/z) = sum_k d_k z^{D-k}; trailing zeros in d are roots at
    # z = 0 of the padded form only, leading zeros are roots at infinity.
    d = d[nz[0]: nz[-1] + 1]
    if d.size <= 1:
        return np.zeros(0, dtype=complex)
    roots = np.roots(d).astype(complex)
    return roots[np.argsort(-np.abs(roots), kind="stable")]


def is_stable(p: MatrixPolynomial, margin: float = 0.0) -> bool:
    """True when every root of det p(z^{-1}) has modulus below 1 - margin."""
    r = det_roots(p)
    return bool(np.all(np.abs(r) < 1.0 - margin))
