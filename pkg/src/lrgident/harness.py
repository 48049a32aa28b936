"""End-to-end pipeline, metrics, Monte-Carlo aggregation and sigma x N sweeps."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .armax_ml import (
    MlOptions,
    ThetaParams,
    build_regressors,
    ls_baseline,
    reconstruct_ym,
    solve_ml,
)
from .latent_filter import filter_compensated, filter_naive
from .maxent import ArModel, LatentTopology, MaxentOptions, MinimumPhaseWarning, solve_maxent
from .simgen import BUILTIN_SYSTEMS, SimRecord, SystemSpec, simulate
from .spectral import DEFAULT_GRID_SIZE, FrequencyGrid, empirical_cov_lags, err_phi, noise_compensate


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.cause = exc


@dataclass
class RunConfig:
    system: str | dict = "example1"
    N: int = 1000
    sigma: float = 0.1
    ar_order: int = 5
    burn_in: int = 500
    grid_size: int = DEFAULT_GRID_SIZE
    fit_norm: str = "spectral"
    degrees: dict | None = None  # {"q": .., "r": .., "row_degrees": [[..], [..]]}
    topology: list | None = None  # latent edges, 1-indexed pairs
    b_mask: list | None = None
    maxent: dict = field(default_factory=dict)
    ml: dict = field(default_factory=dict)
    mc: dict = field(default_factory=lambda: {"trials": 20, "base_seed": 0})
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.system, (str, dict)):
            raise ConfigError("system must be a builtin name or an inline spec")
        if isinstance(self.system, str) and self.system not in BUILTIN_SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}")
        if int(self.N) < 1 or int(self.N) <= self.ar_order:
            raise ConfigError("N must exceed the AR order")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.ar_order < 0 or self.burn_in < 0 or self.grid_size < 8:
            raise ConfigError("ar_order, burn_in must be >= 0 and grid_size >= 8")
        for name in ("eps", "feas_tol"):
            for opts in (self.maxent, self.ml):
                if name in opts and not opts[name] > 0:
                    raise ConfigError(f"{name} must be positive")
        for opts in (self.maxent, self.ml):
            if "max_iter" in opts and int(opts["max_iter"]) < 1:
                raise ConfigError("max_iter must be positive")
            if "alpha" in opts and not 0 < opts["alpha"] < 0.5:
                raise ConfigError("alpha must lie in (0, 0.5)")
            if "beta" in opts and not 0 < opts["beta"] < 1:
                raise ConfigError("beta must lie in (0, 1)")
        if self.fit_norm not in FIT_NORMS:
            raise ConfigError(f"fit_norm must be one of {sorted(FIT_NORMS)}")
        if int(self.mc.get("trials", 1)) < 1:
            raise ConfigError("trials must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def build_system(self) -> SystemSpec:
        try:
            if isinstance(self.system, str):
                sysm = BUILTIN_SYSTEMS[self.system](self.sigma)
            else:
                sysm = SystemSpec.from_dict(self.system).with_sigma(self.sigma)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid system: {exc}") from exc
        th = sysm.theta
        if self.degrees or self.b_mask is not None:
            deg = self.degrees or {}
            q, r = int(deg.get("q", th.q)), int(deg.get("r", th.r))
            mask = np.asarray(self.b_mask, bool) if self.b_mask is not None else th.b_mask
            rd = deg.get("row_degrees", th.row_degrees if (q, r) == (th.q, th.r) else None)
            A = np.zeros((q, th.m, th.m))
            B = np.zeros((r + 1, th.m, th.l))
            A[: min(q, th.q)] = th.A_lags[: min(q, th.q)]
            B[: min(r, th.r) + 1] = th.B_lags[: min(r, th.r) + 1] * mask
            try:
                th = ThetaParams(A, B, mask, rd)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        topo = sysm.topology
        if self.topology is not None:
            try:
                topo = LatentTopology.from_pairs(th.l, self.topology)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return SystemSpec(sysm.W_num, sysm.W_den, th, self.sigma, topo, sysm.name)


FIT_NORMS = {"spectral": 2, "fro": "fro"}


def _norm(M: np.ndarray, norm: str) -> float:
    if norm not in FIT_NORMS:
        raise ValueError(f"unknown norm {norm!r}; use one of {sorted(FIT_NORMS)}")
    M = np.atleast_2d(M)
    if not np.all(np.isfinite(M)):
        return float("inf")
    return float(np.linalg.norm(M, FIT_NORMS[norm]))


def fit_h(theta_hat, theta_true, norm: str = "spectral") -> float:
    """100 (1 - ||Theta_hat - Theta|| / ||Theta||).

    ``norm`` is the induced 2-norm (largest singular value) by default, or
    "fro" for the Frobenius norm.
    """
    a = theta_hat.matrix() if isinstance(theta_hat, ThetaParams) else np.asarray(theta_hat, float)
    b = theta_true.matrix() if isinstance(theta_true, ThetaParams) else np.asarray(theta_true, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    nb = _norm(b, norm)
    if nb == 0:
        raise ValueError("true parameters have zero norm")
    return float(100.0 * (1.0 - _norm(a - b, norm) / nb))


def fit_series(est, truth, norm: str = "spectral") -> float:
    """100 (1 - ||Y_hat - Y|| / ||Y||) on the stacked N x k block, same norms as fit_h."""
    est = np.asarray(est, float)
    truth = np.asarray(truth, float)
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {truth.shape}")
    nt = _norm(truth, norm)
    if nt == 0:
        raise ValueError("true series is identically zero")
    with np.errstate(over="ignore", invalid="ignore"):
        return float(100.0 * (1.0 - _norm(est - truth, norm) / nt))


@dataclass
class PipelineOutput:
    model: ArModel
    y_l_hat: np.ndarray
    theta: ThetaParams
    y_m_hat: np.ndarray
    lambda_shrink: float = 1.0
    iters_maxent: int = 0
    iters_ml: int = 0
    decrement_final: float = float("nan")
    stationarity: float = float("nan")
    ml_converged: bool = True
    ml_trace: list = field(default_factory=list, repr=False)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise PipelineError(name, exc) from exc


def estimate_lrg(system: SystemSpec, zeta: np.ndarray, config: RunConfig) -> PipelineOutput:
    """Noise-aware pipeline: compensated maxent, compensated filter, ML."""
    m, sigma = system.m, config.sigma
    zm, zl = zeta[:, :m], zeta[:, m:]
    lags = _stage("lags", empirical_cov_lags, zl, config.ar_order)
    lags = _stage("noise_compensate", noise_compensate, lags, sigma)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MinimumPhaseWarning)
        me = _stage("maxent", solve_maxent, lags, system.topology, MaxentOptions.from_dict(config.maxent))
    yl = _stage("filter", filter_compensated, me.model, zl, sigma)
    th = system.theta
    reg = _stage("regressors", build_regressors, zm, yl, th.q, th.r)
    init = th.ones_init()
    if sigma > 0:
        ml = _stage("ml", solve_ml, reg, sigma, init, MlOptions.from_dict(config.ml))
    else:
        # sigma = 0 makes Gamma singular; the noise-free relation is exact least squares
        est = _stage("ml", ls_baseline, zm, yl, th.q, th.r, th.b_mask, th.row_degrees)
        ml = None
    theta_hat = ml.theta if ml else est
    with np.errstate(over="ignore", invalid="ignore"):
        ym = reconstruct_ym(theta_hat, yl, check_stability=False)
    return PipelineOutput(
        model=me.model, y_l_hat=yl, theta=theta_hat, y_m_hat=ym,
        lambda_shrink=lags.shrink, iters_maxent=me.iterations,
        iters_ml=ml.iterations if ml else 0,
        decrement_final=ml.decrement if ml else 0.0,
        stationarity=ml.stationarity if ml else 0.0,
        ml_converged=ml.converged if ml else True,
        ml_trace=ml.trace if ml else [],
    )


def estimate_lr(system: SystemSpec, zeta: np.ndarray, config: RunConfig) -> PipelineOutput:
    """Noise-blind baseline: maxent on raw lags, free-running filter, least squares."""
    m = system.m
    zm, zl = zeta[:, :m], zeta[:, m:]
    lags = _stage("lr_lags", empirical_cov_lags, zl, config.ar_order)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MinimumPhaseWarning)
        me = _stage("lr_maxent", solve_maxent, lags, system.topology, MaxentOptions.from_dict(config.maxent))
    yl = _stage("lr_filter", filter_naive, me.model, zl)
    th = system.theta
    est = _stage("lr_ls", ls_baseline, zm, yl, th.q, th.r, th.b_mask, th.row_degrees)
    with np.errstate(over="ignore", invalid="ignore"):
        ym = reconstruct_ym(est, yl, check_stability=False)
    return PipelineOutput(model=me.model, y_l_hat=yl, theta=est, y_m_hat=ym,
                          iters_maxent=me.iterations)


@dataclass
class EstimationReport:
    err_phi: float
    fit_H: float
    fit_yl: float
    fit_ym: float
    lambda_shrink: float
    iters_maxent: int
    iters_ml: int
    decrement_final: float
    stationarity: float
    seed: int | None
    ml_converged: bool = True
    baseline: dict = field(default_factory=dict)
    P_hat: np.ndarray | None = field(default=None, repr=False)
    theta_hat: ThetaParams | None = field(default=None, repr=False)
    baseline_P: np.ndarray | None = field(default=None, repr=False)
    baseline_theta: ThetaParams | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        keys = ["err_phi", "fit_H", "fit_yl", "fit_ym", "lambda_shrink", "iters_maxent",
                "iters_ml", "decrement_final", "stationarity", "seed"]
        d = {k: _jsonable(getattr(self, k)) for k in keys}
        d["ml_converged"] = self.ml_converged
        d["baseline"] = {k: _jsonable(v) for k, v in self.baseline.items()}
        if self.theta_hat is not None:
            d["theta_hat"] = self.theta_hat.to_dict()
        if self.P_hat is not None:
            d["P_hat"] = self.P_hat.tolist()
        return d


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def _metrics(system, out: PipelineOutput, truth: SimRecord | None, grid, norm: str) -> dict:
    if truth is None:
        return {"err_phi": float("nan"), "fit_H": fit_h(out.theta, system.theta, norm),
                "fit_yl": float("nan"), "fit_ym": float("nan")}
    return {
        "err_phi": err_phi(out.model, system.latent_spectrum, system.topology, grid),
        "fit_H": fit_h(out.theta, system.theta, norm),
        "fit_yl": fit_series(out.y_l_hat, truth.y_l, norm),
        "fit_ym": fit_series(out.y_m_hat, truth.y_m, norm),
    }


def report_from_data(config: RunConfig, zeta: np.ndarray, truth: SimRecord | None = None,
                     seed: int | None = None, baseline: bool = True) -> EstimationReport:
    system = config.build_system()
    if zeta.shape[1] != system.m + system.l:
        raise ConfigError(f"data has {zeta.shape[1]} channels, system expects {system.m + system.l}")
    grid = FrequencyGrid.uniform(config.grid_size)
    out = estimate_lrg(system, zeta, config)
    met = _metrics(system, out, truth, grid, config.fit_norm)
    rep = EstimationReport(
        **met, lambda_shrink=out.lambda_shrink, iters_maxent=out.iters_maxent,
        iters_ml=out.iters_ml, decrement_final=out.decrement_final,
        stationarity=out.stationarity, seed=seed, ml_converged=out.ml_converged,
        P_hat=out.model.P, theta_hat=out.theta,
    )
    if baseline:
        lr = estimate_lr(system, zeta, config)
        rep.baseline = _metrics(system, lr, truth, grid, config.fit_norm)
        rep.baseline_P = lr.model.P
        rep.baseline_theta = lr.theta
    return rep


def run_single(config: RunConfig, seed: int, baseline: bool = True) -> EstimationReport:
    system = config.build_system()
    rec = _stage("simulate", simulate, system, config.N, seed, config.burn_in)
    return report_from_data(config, rec.zeta, rec, seed, baseline)


def _param_columns(theta: ThetaParams) -> list[tuple[str, tuple]]:
    """Names and Theta-matrix indices of the free parameters."""
    free = theta.free_mask()
    m, q = theta.m, theta.q
    cols = []
    for i in range(m):
        for c in range(theta.p):
            if not free[i, c]:
                continue
            if c < m * q:
                name = f"A{c // m + 1}_{i + 1}{c % m + 1}"
            else:
                cc = c - m * q
                name = f"B{cc // theta.l}_{i + 1}{cc % theta.l + 1}"
            cols.append((name, (i, c)))
    return cols


@dataclass
class McReport:
    aggregate: dict
    trials: list
    failures: list

    def to_dict(self) -> dict:
        return {"aggregate": {k: _jsonable(v) if not isinstance(v, dict) else
                              {kk: _jsonable(vv) for kk, vv in v.items()}
                              for k, v in self.aggregate.items()},
                "failures": self.failures,
                "n_trials": len(self.trials)}

    def write_csv(self, path) -> None:
        if not self.trials:
            return
        keys = list(self.trials[0].keys())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for row in self.trials:
                w.writerow({k: _jsonable(v) for k, v in row.items()})


def run_mc(config: RunConfig, trials: int | None = None, baseline: bool = True) -> McReport:
    """Trials use seeds base_seed + k.  err_phi and fit_H are taken at the mean
    estimate; the series fits are per-trial averages."""
    trials = int(trials if trials is not None else config.mc.get("trials", 20))
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    base = int(config.mc.get("base_seed", 0))
    system = config.build_system()
    grid = FrequencyGrid.uniform(config.grid_size)
    cols = _param_columns(system.theta)
    reports, rows, failures = [], [], []
    for k in range(trials):
        seed = base + k
        try:
            rep = run_single(config, seed, baseline)
        except PipelineError as exc:
            failures.append({"seed": seed, "stage": exc.stage, "error": str(exc.cause)})
            continue
        reports.append(rep)
        row = {"seed": seed, **{k2: v for k2, v in rep.to_dict().items()
                                if k2 in ("err_phi", "fit_H", "fit_yl", "fit_ym", "lambda_shrink",
                                          "iters_maxent", "iters_ml", "stationarity")}}
        row["ml_converged"] = rep.ml_converged
        for key, v in rep.baseline.items():
            row[f"lr_{key}"] = v
        Th = rep.theta_hat.matrix()
        for name, (i, c) in cols:
            row[name] = float(Th[i, c])
        rows.append(row)
    if len(reports) * 2 < trials:
        raise PipelineError("mc", RuntimeError(f"{len(failures)} of {trials} trials failed"))

    def agg(P_list, th_list, fits_yl, fits_ym, fits_h):
        mean_model = ArModel(np.mean(P_list, axis=0))
        mean_th = system.theta.with_matrix(np.mean([t.matrix() for t in th_list], axis=0))
        return {
            "err_phi": err_phi(mean_model, system.latent_spectrum, system.topology, grid),
            "fit_H": fit_h(mean_th, system.theta, config.fit_norm),
            "fit_yl": float(np.mean(fits_yl)),
            "fit_ym": float(np.mean(fits_ym)),
            "fit_H_trial_mean": float(np.mean(fits_h)),
        }

    aggregate = agg([r.P_hat for r in reports], [r.theta_hat for r in reports],
                    [r.fit_yl for r in reports], [r.fit_ym for r in reports],
                    [r.fit_H for r in reports])
    aggregate["trials_ok"] = len(reports)
    aggregate["mean_theta"] = system.theta.with_matrix(
        np.mean([r.theta_hat.matrix() for r in reports], axis=0)).to_dict()
    if baseline:
        with np.errstate(over="ignore", invalid="ignore"):
            aggregate["baseline"] = agg([r.baseline_P for r in reports],
                                        [r.baseline_theta for r in reports],
                                        [r.baseline["fit_yl"] for r in reports],
                                        [r.baseline["fit_ym"] for r in reports],
                                        [r.baseline["fit_H"] for r in reports])
        aggregate["lrg_beats_lr_fit_H"] = int(sum(r.fit_H > r.baseline["fit_H"] for r in reports))
    return McReport(aggregate, rows, failures)


def parse_sigma_list(spec: str) -> list[float]:
    """'0.1,0.2' or 'a:b:log:k' (k log-spaced values from a to b)."""
    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 4 or parts[2] != "log":
            raise ConfigError(f"bad sigma range {spec!r}; expected a:b:log:k")
        a, b, k = float(parts[0]), float(parts[1]), int(parts[3])
        if a <= 0 or b <= 0 or k < 1:
            raise ConfigError("log range needs positive bounds and k >= 1")
        return [float(v) for v in np.logspace(np.log10(a), np.log10(b), k)]
    try:
        vals = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not vals:
        raise ConfigError("empty sigma list")
    return vals


SWEEP_COLUMNS = ["sigma", "N", "err_phi", "fit_H", "fit_yl", "fit_ym",
                 "median_fit_H", "median_fit_yl", "median_fit_ym", "trials_ok"]


def sweep(config: RunConfig, sigmas=None, Ns=None, trials: int | None = None,
          out_csv=None) -> list[dict]:
    """One MC-aggregated row per (sigma, N) cell."""
    sigmas = list(sigmas if sigmas is not None else config.sweep.get("sigma", []))
    Ns = list(Ns if Ns is not None else config.sweep.get("N", []))
    if not sigmas or not Ns:
        raise ConfigError("sweep needs non-empty sigma and N lists")
    rows = []
    for N in Ns:
        for s in sigmas:
            cfg = RunConfig.from_dict({**config.to_dict(), "sigma": float(s), "N": int(N)})
            rep = run_mc(cfg, trials, baseline=False)
            a = rep.aggregate
            rows.append({
                "sigma": float(s), "N": int(N), "err_phi": a["err_phi"], "fit_H": a["fit_H"],
                "fit_yl": a["fit_yl"], "fit_ym": a["fit_ym"],
                "median_fit_H": float(np.median([t["fit_H"] for t in rep.trials])),
                "median_fit_yl": float(np.median([t["fit_yl"] for t in rep.trials])),
                "median_fit_ym": float(np.median([t["fit_ym"] for t in rep.trials])),
                "trials_ok": a["trials_ok"],
            })
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: _jsonable(v) for k, v in row.items()})
    return rows
