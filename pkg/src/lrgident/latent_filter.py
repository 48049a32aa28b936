"""Recursive estimation of the latent series from its noisy measurements."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .maxent import ArModel


def _check(model: ArModel, zeta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zeta = np.asarray(zeta, dtype=float)
    if zeta.ndim == 1:
        zeta = zeta[:, None]
    if zeta.shape[1] != model.dim:
        raise ValueError(f"series has {zeta.shape[1]} channels, model has {model.dim}")
    if zeta.shape[0] <= model.order:
        raise ValueError("series must be longer than the model order")
    P0 = model.P[0]
    if np.linalg.cond(P0) > 1e14:
        raise np.linalg.LinAlgError("P_0 is singular")
    # one-step predictor matrices: pred(t) = sum_j G_j yhat(t-j)
    G = -np.linalg.solve(P0, model.P[1:].transpose(1, 0, 2).reshape(model.dim, -1))
    return zeta, G.reshape(model.dim, model.order, model.dim).transpose(1, 0, 2)


def compensation_gain(model: ArModel, sigma: float) -> float:
    """c = 1 / (1 + sigma^{2l} det(P_0' P_0))."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    P0 = model.P[0]
    return 1.0 / (1.0 + sigma ** (2 * model.dim) * np.linalg.det(P0.T @ P0))


@dataclass
class FilterState:
    """Streaming form of :func:`filter_compensated`.

    The first ``n`` calls to :meth:`update` return the measurement itself.
    """

    model: ArModel
    sigma: float
    history: deque = field(default_factory=deque)

    def __post_init__(self):
        _, self._G = _check(self.model, np.zeros((self.model.order + 1, self.model.dim)))
        self._c = compensation_gain(self.model, self.sigma)
        self.history = deque(self.history, maxlen=self.model.order)

    def update(self, zeta_t) -> np.ndarray:
        zeta_t = np.asarray(zeta_t, dtype=float)
        n = self.model.order
        if len(self.history) < n or n == 0:
            y = zeta_t.copy() if n else self._c * zeta_t
        else:
            pred = sum(self._G[j] @ self.history[-1 - j] for j in range(n))
            y = pred + self._c * (zeta_t - pred)
        if n:
            self.history.append(y)
        return y


def filter_compensated(model: ArModel, zeta_l, sigma: float) -> np.ndarray:
    """AR prediction plus a scaled share of the measurement innovation.

    yhat(t) = pred(t) + c (zeta(t) - pred(t)) for t > n, yhat(t) = zeta(t) for t <= n.
    """
    zeta, G = _check(model, zeta_l)
    c = compensation_gain(model, sigma)
    n = model.order
    out = np.empty_like(zeta)
    out[:n] = zeta[:n]
    for t in range(n, zeta.shape[0]):
        pred = np.zeros(model.dim)
        for j in range(n):
            pred += G[j] @ out[t - 1 - j]
        out[t] = pred + c * (zeta[t] - pred)
    return out


def filter_naive(model: ArModel, zeta_l) -> np.ndarray:
    """Free-running AR recursion started from the first n measurements."""
    zeta, G = _check(model, zeta_l)
    n = model.order
    out = np.empty_like(zeta)
    out[:n] = zeta[:n]
    for t in range(n, zeta.shape[0]):
        pred = np.zeros(model.dim)
        for j in range(n):
            pred += G[j] @ out[t - 1 - j]
        out[t] = pred
    return out
