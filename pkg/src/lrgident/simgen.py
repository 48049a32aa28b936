"""Synthetic low-rank systems and seeded simulation.

The measured vector is zeta = [y_m; y_l] + sigma e with the latent block last,
y_l = W_l(z) w~ for unit white noise w~, and y_m = A^{-1}(z) B(z) y_l.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .armax_ml import ThetaParams, reconstruct_ym
from .maxent import LatentTopology
from .polymat import det_roots


def _roots_backward(c) -> np.ndarray:
    """Roots z of c_0 + c_1 z^{-1} + ... (i.e. of the forward polynomial)."""
    c = np.trim_zeros(np.asarray(c, float), "b")
    return np.roots(c) if c.size > 1 else np.zeros(0)


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Latent shaping filter, deterministic relation and noise level.

    ``W_num[i][j]`` / ``W_den[i][j]`` are coefficient lists in z^{-1};
    a ``None`` numerator marks a zero entry.
    """

    W_num: list
    W_den: list
    theta: ThetaParams
    sigma: float = 0.1
    topology: LatentTopology | None = None
    name: str = "custom"

    def __post_init__(self):
        l = self.theta.l
        if len(self.W_num) != l or any(len(r) != l for r in self.W_num):
            raise ValueError("W_l must be l x l")
        for i in range(l):
            for j in range(l):
                if self.W_num[i][j] is None:
                    continue
                den = np.asarray(self.W_den[i][j], float)
                if den[0] == 0:
                    raise ValueError(f"W_l[{i + 1},{j + 1}] denominator has zero leading term")
                r = _roots_backward(den)
                if r.size and np.abs(r).max() >= 1.0:
                    raise ValueError(f"W_l[{i + 1},{j + 1}] is unstable: poles {r}")
        # minimum phase: det W_l has no zeros outside the unit disc.  For a
        # triangular W_l this is the diagonal numerators.
        if self._lower_triangular():
            for i in range(l):
                num = self.W_num[i][i]
                if num is None:
                    raise ValueError("W_l is singular")
                z = _roots_backward(num)
                if z.size and np.abs(z).max() >= 1.0:
                    raise ValueError(f"W_l[{i + 1},{i + 1}] is not minimum phase")
        roots = det_roots(self.theta.A_poly())
        if roots.size and np.abs(roots).max() >= 1.0:
            raise ValueError(f"A(z^-1) is unstable: roots {roots}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.topology is None:
            object.__setattr__(self, "topology", self._implied_topology())

    def _lower_triangular(self) -> bool:
        l = self.theta.l
        return all(self.W_num[i][j] is None for i in range(l) for j in range(i + 1, l))

    def _implied_topology(self) -> LatentTopology:
        grid = np.linspace(-np.pi, np.pi, 64, endpoint=False)
        Pinv = np.linalg.inv(self.latent_spectrum(grid))
        scale = np.abs(Pinv).max()
        l = self.l
        pairs = [(k + 1, h + 1) for k in range(l) for h in range(k + 1)
                 if np.abs(Pinv[:, k, h]).max() > 1e-9 * scale]
        return LatentTopology.from_pairs(l, pairs)

    @property
    def m(self) -> int:
        return self.theta.m

    @property
    def l(self) -> int:
        return self.theta.l

    def with_sigma(self, sigma: float) -> "SystemSpec":
        return SystemSpec(self.W_num, self.W_den, self.theta, sigma, self.topology, self.name)

    def latent_filter_response(self, theta) -> np.ndarray:
        """W_l(e^{i theta}), shape (len(theta), l, l)."""
        theta = np.atleast_1d(np.asarray(theta, float))
        w = np.exp(-1j * theta)
        out = np.zeros(theta.shape + (self.l, self.l), complex)
        for i in range(self.l):
            for j in range(self.l):
                if self.W_num[i][j] is not None:
                    num = np.polynomial.polynomial.polyval(w, self.W_num[i][j])
                    den = np.polynomial.polynomial.polyval(w, self.W_den[i][j])
                    out[..., i, j] = num / den
        return out

    def latent_spectrum(self, theta) -> np.ndarray:
        """Phi_{y_l} = W_l W_l^*."""
        W = self.latent_filter_response(theta)
        return W @ np.swapaxes(W.conj(), -1, -2)

    def transfer_H(self, theta) -> np.ndarray:
        return self.theta.transfer(np.atleast_1d(np.asarray(theta, float)))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sigma": self.sigma,
            "W_num": self.W_num,
            "W_den": self.W_den,
            "theta": self.theta.to_dict(),
            "topology": self.topology.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        theta = ThetaParams.from_dict(d["theta"])
        topo = d.get("topology")
        topo = None if topo is None else LatentTopology.from_pairs(theta.l, topo)
        return cls(d["W_num"], d["W_den"], theta, float(d.get("sigma", 0.1)), topo,
                   d.get("name", "custom"))


def example1_system(sigma: float = 0.1) -> SystemSpec:
    """Seven-channel, rank-three benchmark: four measured outputs, three latent inputs."""
    W_num = [[[1.0], None, None],
             [[0.0, 1.0], [1.0], None],
             [None, None, [1.0]]]
    W_den = [[[1.0, -0.8, -0.25, 0.2], None, None],
             [[1.0, 0.0, -0.25], [1.0, 0.3, -0.1], None],
             [None, None, [1.0, 0.0, -0.64]]]
    m, l, q, r = 4, 3, 2, 2
    A = np.zeros((q, m, m))
    A[:, 0, 0] = [-0.9, 0.0]
    A[:, 1, 1] = [0.0, -0.64]
    A[:, 2, 2] = [-0.1, -0.42]
    A[:, 3, 3] = [0.2, -0.48]
    B = np.zeros((r + 1, m, l))
    B[:, 0, 0] = [0.5, 0.15, 0.0]
    B[:, 1, 0] = [1.0, 0.3, -0.4]
    B[:, 1, 1] = [1.0, -0.3, -0.4]
    B[:, 2, 1] = [1.0, -0.5, -0.14]
    B[:, 2, 2] = [1.0, 1.0, 0.24]
    B[:, 3, 0] = [1.0, -1.1, 0.3]
    B[:, 3, 1] = [1.0, -0.1, -0.3]
    B[:, 3, 2] = [-2.0, -2.0, -0.32]
    mask = np.ones((m, l), bool)
    for i, j in [(1, 2), (1, 3), (2, 3), (3, 1)]:
        mask[i - 1, j - 1] = False
    degrees = ((1, 2, 2, 2), (1, 2, 2, 2))
    theta = ThetaParams(A, B, mask, degrees)
    topo = LatentTopology.from_pairs(l, [(2, 1)])
    return SystemSpec(W_num, W_den, theta, sigma, topo, "example1")


BUILTIN_SYSTEMS = {"example1": example1_system}


@dataclass
class SimRecord:
    y_l: np.ndarray
    y_m: np.ndarray
    e: np.ndarray  # scaled noise sigma * e_std, shape (N, m + l)
    seed: int
    burn_in: int
    sigma: float
    meta: dict = field(default_factory=dict)

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.y_m, self.y_l], axis=1)

    @property
    def zeta(self) -> np.ndarray:
        return self.y + self.e

    @property
    def N(self) -> int:
        return self.y_l.shape[0]

    def write_csv(self, path, which: str = "zeta") -> None:
        """Series CSV with header t,ch1..chK and a metadata sidecar JSON."""
        data = getattr(self, which)
        write_series_csv(path, data)
        side = Path(str(path) + ".json")
        side.write_text(json.dumps({"seed": self.seed, "N": self.N, "burn_in": self.burn_in,
                                    "sigma": self.sigma, "series": which, **self.meta}, indent=2))


def write_series_csv(path, data: np.ndarray) -> None:
    data = np.asarray(data, float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"ch{i + 1}" for i in range(data.shape[1])])
        for t, row in enumerate(data, start=1):
            w.writerow([t] + [repr(float(v)) for v in row])


def read_series_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ValueError(f"{path}: expected header starting with 't'")
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])


def simulate(system: SystemSpec, N: int, seed: int, burn_in: int = 500) -> SimRecord:
    """Draw w~ then e from a Philox stream and run both filters from rest."""
    if N < 1:
        raise ValueError("N must be positive")
    if burn_in < 0:
        raise ValueError("burn_in must be non-negative")
    m, l = system.m, system.l
    T = N + burn_in
    rng = np.random.Generator(np.random.Philox(seed))
    w = rng.standard_normal((T, l))
    e = rng.standard_normal((T, m + l))
    y_l = np.zeros((T, l))
    for i in range(l):
        for j in range(l):
            if system.W_num[i][j] is not None:
                y_l[:, i] += lfilter(system.W_num[i][j], system.W_den[i][j], w[:, j])
    y_m = reconstruct_ym(system.theta, y_l, check_stability=False)
    sl = slice(burn_in, None)
    return SimRecord(y_l[sl].copy(), y_m[sl].copy(), system.sigma * e[sl], seed, burn_in,
                     system.sigma, {"system": system.name})
