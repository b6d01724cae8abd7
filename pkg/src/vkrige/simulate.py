"""
Synthetic experiments comparing the VS pipeline with standard kriging.

Truth is ``Y(s) = b0 + bx x + by y + bh h(s) + eps(s)`` with a Matern
Gaussian random field ``eps`` and a deterministic altitude surface ``h``
made of Gaussian bumps. Observations are contaminated by an
additive-multiplicative model: each site is clean with probability ``q_e``;
otherwise ``Z = eM Y + eA`` with ``eM ~ 2 Beta(a, a)`` and
``eA ~ N(0, sigma_A^2)``.

Every replicate draws from its own Philox stream keyed by
``(seed, replicate)``, so summaries do not depend on the worker count.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ParameterError, SingularSystemError, VKrigeError
from .geo import Dataset, pairwise_distances
from .pipeline import PipelineConfig, adaptive_nu_for, fit_standard, fit_vs, reference_surface
from .trend import TrendSpec, covariate_rows
from .variogram import VariogramModel, covariance
from .veracity import VeracityConfig

TRUE_BETA = (55.0, 1.5, -1.0, -0.08)
TRUE_THETA = VariogramModel("matern", nugget=0.0, partial_sill=6.0, range=0.5, smoothness=3.0)
GRF_MAX_SITES = 5000
METHODS = ("vs", "standard", "ref_only")
BETA_NAMES = ("beta0", "beta_x", "beta_y", "beta_h")


@dataclass(frozen=True)
class NoiseModel:
    sigma_A: float
    alpha_M: float
    q_e: float

    def __post_init__(self):
        if self.sigma_A < 0:
            raise ParameterError("sigma_A must be non-negative")
        if not self.alpha_M > 0:
            raise ParameterError("alpha_M must be positive")
        if not 0.0 <= self.q_e <= 1.0:
            raise ParameterError("q_e must lie in [0, 1]")

    @property
    def sigma_M2(self) -> float:
        """Variance of ``2 Beta(a, a)``."""
        return 1.0 / (2.0 * self.alpha_M + 1.0)


NOISE_PRESETS = {
    "a": NoiseModel(5.0, 2.0, 0.95),
    "b": NoiseModel(50.0, 0.5, 0.9),
    "c": NoiseModel(100.0, 0.05, 0.8),
    "clean": NoiseModel(0.0, 1.0, 1.0),
}


@dataclass(frozen=True)
class AltitudeParams:
    """``h(s) = H1 sum_j w_j f(s; mu_j, Sigma_j) + H3`` with Gaussian densities ``f``."""

    H1: float
    weights: tuple
    centers: tuple
    covs: tuple
    H3: float = 0.0

    def __post_init__(self):
        if not (len(self.weights) == len(self.centers) == len(self.covs)):
            raise ParameterError("altitude weights, centers and covariances differ in length")
        for S in self.covs:
            S = np.asarray(S, dtype=float)
            if S.shape != (2, 2) or not np.allclose(S, S.T) or np.any(np.linalg.eigvalsh(S) <= 0):
                raise ParameterError(f"bump covariance {S.tolist()} is not symmetric positive definite")

    @property
    def H2(self) -> int:
        return len(self.weights)

    @classmethod
    def default(cls, side: float) -> "AltitudeParams":
        """Three bumps laid out over ``[0, side]^2``.

        Base level 20 m; the tallest bump rises about 150 m above it.
        """
        s = float(side)
        centers = ((0.3 * s, 0.35 * s), (0.7 * s, 0.65 * s), (0.55 * s, 0.2 * s))
        spreads = (0.2 * s, 0.15 * s, 0.25 * s)
        covs = tuple(((sd**2, 0.0), (0.0, sd**2)) for sd in spreads)
        weights = (0.5, 0.3, 0.2)
        # peak of the first bump is H1 * 0.5 / (2 pi sd^2) = 150
        H1 = 150.0 * 2.0 * math.pi * spreads[0] ** 2 / weights[0]
        return cls(H1, weights, centers, covs, 20.0)


def altitude(s, params: AltitudeParams) -> np.ndarray | float:
    pts = np.asarray(s, dtype=float)
    scalar = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    total = np.zeros(pts.shape[0])
    for w, mu, S in zip(params.weights, params.centers, params.covs):
        S = np.asarray(S, dtype=float)
        d = pts - np.asarray(mu, dtype=float)
        Sinv = np.linalg.inv(S)
        quad = np.einsum("ij,jk,ik->i", d, Sinv, d)
        total += w * np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(np.linalg.det(S)))
    out = params.H1 * total + params.H3
    return float(out[0]) if scalar else out


def default_lambda(n: int) -> float:
    return math.sqrt(n) / 5.0


@dataclass(frozen=True)
class SimConfig:
    """Experiment design. ``lambda_n``/``Lambda_m``/``altitude`` default from ``n``.

    Defaults: ``lambda_n = sqrt(n) / 5``, ``Lambda_m = 5 lambda_n`` (a few
    reference sites fall inside the noisy-data region) and three altitude
    bumps laid out over ``[0, lambda_n]^2``.

    ``q`` is the smoothing exponent (or candidate list) used by the VS
    pipeline; ``delta`` and ``alpha`` are its neighbourhood half-width and
    baseline deviation. ``nu`` fixes the benchmark mixing weight; ``None``
    uses the adaptive rule driven by the reference fit.
    """

    n: int = 100
    m: int = 0
    lambda_n: float | None = None
    Lambda_m: float | None = None
    beta: tuple = TRUE_BETA
    theta: VariogramModel = TRUE_THETA
    altitude: AltitudeParams | None = None
    noise: NoiseModel = NOISE_PRESETS["b"]
    seed: int = 0
    alpha: float = 3.0
    delta: float = 0.5
    q: float | tuple = 1.0
    fit_smoothness: float = 3.0
    fix_kappa: bool = True
    nu: float | None = 0.5

    def __post_init__(self):
        if self.n < 3:
            raise ParameterError("n must be at least 3")
        if self.m < 0:
            raise ParameterError("m must be non-negative")
        lam = self.lambda_n if self.lambda_n is not None else default_lambda(self.n)
        if not lam > 0:
            raise ParameterError("lambda_n must be positive")
        object.__setattr__(self, "lambda_n", float(lam))
        if self.Lambda_m is None:
            object.__setattr__(self, "Lambda_m", 5.0 * lam)
        if self.m > 0 and self.Lambda_m < lam:
            raise ParameterError("Lambda_m must be at least lambda_n when reference data are used")
        if self.altitude is None:
            object.__setattr__(self, "altitude", AltitudeParams.default(lam))
        if len(self.beta) != 4:
            raise ParameterError("beta needs (b0, bx, by, bh)")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            spec=TrendSpec(),
            family="matern",
            smoothness=self.fit_smoothness,
            fix_kappa=self.fix_kappa,
            veracity=VeracityConfig(alpha=self.alpha, delta=self.delta),
            q=self.q,
        )


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate)])))


def sample_sites(count: int, side: float, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ParameterError("count must be >= 1")
    if not side > 0:
        raise ParameterError("side must be positive")
    return rng.uniform(0.0, side, size=(count, 2))


def sample_grf(sites, m: VariogramModel, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero Gaussian draw with covariance ``C(|s_i - s_j|)``."""
    xy = np.asarray(sites, dtype=float).reshape(-1, 2)
    n = xy.shape[0]
    if n > GRF_MAX_SITES:
        raise ParameterError(f"{n} sites exceeds the dense-factorisation limit {GRF_MAX_SITES}")
    C = covariance(pairwise_distances(xy), m)
    z = rng.standard_normal(n)
    if m.sill == 0:
        return np.zeros(n)
    jit = 0.0
    for attempt in range(6):
        try:
            L = np.linalg.cholesky(C + jit * np.eye(n) if jit else C)
            return L @ z
        except np.linalg.LinAlgError:
            jit = m.sill * 10.0 ** (-12 + 2 * attempt)
    raise SingularSystemError("covariance matrix not positive definite even with jitter")


def trend_values(xy, beta, params: AltitudeParams) -> np.ndarray:
    X = covariate_rows(xy, altitude(np.asarray(xy).reshape(-1, 2), params), TrendSpec())
    return X @ np.asarray(beta, dtype=float)


def gen_truth(sites, beta, theta: VariogramModel, params: AltitudeParams, rng) -> np.ndarray:
    return trend_values(sites, beta, params) + sample_grf(sites, theta, rng)


def inject_noise(y, nm: NoiseModel, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Contaminated copy of ``y`` and the boolean clean mask."""
    y = np.asarray(y, dtype=float)
    n = y.size
    clean = rng.random(n) < nm.q_e
    eM = 2.0 * rng.beta(nm.alpha_M, nm.alpha_M, size=n)
    eA = rng.normal(0.0, nm.sigma_A, size=n) if nm.sigma_A > 0 else np.zeros(n)
    z = np.where(clean, y, eM * y + eA)
    return z, clean


def rmspe(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.size == 0:
        raise ParameterError(f"length mismatch {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


resrmspe = rmspe


def eval_grid(lambda_n: float) -> np.ndarray:
    """``4 ceil(lambda) x 4 ceil(lambda)`` grid spanning ``[0, lambda]^2``."""
    if not lambda_n > 0:
        raise ParameterError("lambda_n must be positive")
    k = 4 * math.ceil(lambda_n)
    ax = np.linspace(0.0, lambda_n, k)
    gx, gy = np.meshgrid(ax, ax, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


# --------------------------------------------------------------------------
# replicates
# --------------------------------------------------------------------------

@dataclass
class MethodResult:
    beta: np.ndarray
    sill: float
    range: float
    rmspe: float
    resrmspe: float


@dataclass
class ReplicateResult:
    replicate: int
    methods: dict = field(default_factory=dict)
    error: str | None = None
    clean_fraction: float = float("nan")


def _evaluate(fit, grid, h_grid, y_grid, eps_grid) -> MethodResult:
    out = fit.predict(grid, h_grid)
    return MethodResult(
        beta=np.asarray(fit.trend.beta, dtype=float),
        sill=fit.model.sill,
        range=fit.model.range,
        rmspe=rmspe(out["prediction"], y_grid),
        resrmspe=rmspe(out["residual"], eps_grid),
    )


def run_replicate(cfg: SimConfig, r: int, methods: Sequence[str]) -> ReplicateResult:
    rng = replicate_rng(cfg.seed, r)
    res = ReplicateResult(r)
    try:
        sites = sample_sites(cfg.n, cfg.lambda_n, rng)
        ref_sites = sample_sites(cfg.m, cfg.Lambda_m, rng) if cfg.m > 0 else np.empty((0, 2))
        grid = eval_grid(cfg.lambda_n)
        all_xy = np.vstack([sites, ref_sites, grid])
        eps = sample_grf(all_xy, cfg.theta, rng)
        h = altitude(all_xy, cfg.altitude)
        y = covariate_rows(all_xy, h, TrendSpec()) @ np.asarray(cfg.beta, dtype=float) + eps
        n, m = cfg.n, cfg.m
        z, clean = inject_noise(y[:n], cfg.noise, rng)
        res.clean_fraction = float(clean.mean())
        data = Dataset.from_arrays(sites, z, h[:n])
        g = slice(n + m, None)
        pcfg = cfg.pipeline_config()
        ref = None
        if m > 0:
            ref_data = Dataset.from_arrays(ref_sites, y[n:n + m], h[n:n + m])
            ref = reference_surface(ref_data, pcfg)
        if "vs" in methods:
            vcfg = pcfg
            if ref is not None:
                nu = adaptive_nu_for(ref) if cfg.nu is None else cfg.nu
                vcfg = replace(pcfg, veracity=replace(pcfg.veracity, nu=nu))
            res.methods["vs"] = _evaluate(fit_vs(data, vcfg, ref), grid, h[g], y[g], eps[g])
        if "standard" in methods:
            res.methods["standard"] = _evaluate(fit_standard(data, pcfg), grid, h[g], y[g], eps[g])
        if "ref_only" in methods and ref is not None:
            res.methods["ref_only"] = _evaluate(ref, grid, h[g], y[g], eps[g])
    except (VKrigeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        res.methods = {}
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _run_chunk(args):
    cfg, rs, methods = args
    return [run_replicate(cfg, r, methods) for r in rs]


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------

@dataclass
class ExperimentSummary:
    """Per-method ``metric -> (mean, sd)`` plus the kept replicates."""

    config: SimConfig
    methods: tuple
    table: dict
    B: int
    failed: int
    failures: list
    replicates: list

    def value(self, method: str, metric: str) -> float:
        return self.table[method][metric][0]

    def sd(self, method: str, metric: str) -> float:
        return self.table[method][metric][1]

    def per_replicate(self, method: str, attr: str) -> np.ndarray:
        return np.array([getattr(rep.methods[method], attr) for rep in self.replicates])

    def rows(self):
        for method in self.methods:
            for metric, (mean, sd) in self.table[method].items():
                yield method, metric, mean, sd, self.B

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "metric", "mean", "sd", "B"])
            for method, metric, mean, sd, B in self.rows():
                w.writerow([method, metric, f"{mean:.17g}", f"{sd:.17g}", B])


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), sd


def summarize(cfg: SimConfig, methods, results: list[ReplicateResult]) -> ExperimentSummary:
    kept = [r for r in results if r.error is None]
    failures = [(r.replicate, r.error) for r in results if r.error is not None]
    if not kept:
        raise VKrigeError(f"all {len(results)} replicates failed; first error: {failures[0][1]}")
    beta_true = np.asarray(cfg.beta, dtype=float)
    table = {}
    for method in methods:
        recs = [r.methods[method] for r in kept]
        betas = np.array([rec.beta for rec in recs])
        entry = {}
        for k, name in enumerate(BETA_NAMES):
            entry[f"bias.{name}"] = _mean_sd(betas[:, k] - beta_true[k])
        entry["bias.sill"] = _mean_sd([rec.sill - cfg.theta.sill for rec in recs])
        entry["bias.range"] = _mean_sd([rec.range - cfg.theta.range for rec in recs])
        entry["Av.RMSPE"] = _mean_sd([rec.rmspe for rec in recs])
        entry["Av.ResRMSPE"] = _mean_sd([rec.resrmspe for rec in recs])
        table[method] = entry
    return ExperimentSummary(cfg, tuple(methods), table, len(kept), len(failures), failures, kept)


def default_threads() -> int:
    raw = os.environ.get("VKRIGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ParameterError(f"VKRIGE_THREADS must be an integer, got {raw!r}") from None


def run_experiment(cfg: SimConfig, B: int, methods: Sequence[str] = ("vs", "standard"),
                   threads: int | None = None) -> ExperimentSummary:
    """Run ``B`` replicates and aggregate per-method bias and error metrics.

    Failed replicates are dropped and counted in ``summary.failed``.
    """
    if B < 1:
        raise ParameterError("B must be >= 1")
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ParameterError(f"unknown methods {sorted(unknown)}")
    if "ref_only" in methods and cfg.m == 0:
        raise ParameterError("ref_only needs reference data (m > 0)")
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1:
        results = [run_replicate(cfg, r, methods) for r in range(B)]
    else:
        chunks = [list(range(B))[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(_run_chunk, [(cfg, c, methods) for c in chunks if c]))
        results = sorted((r for part in parts for r in part), key=lambda r: r.replicate)
    return summarize(cfg, methods, results)


def weighted_mean_variance_ratio(n: int, reps: int, rng: np.random.Generator, C: float = 1.0) -> float:
    """Sample-variance ratio of the inverse-variance weighted mean to the plain mean.

    Draws ``Z_i ~ N(0, C i)`` independently, ``i = 1..n``, ``reps`` times.
    """
    var = C * np.arange(1, n + 1, dtype=float)
    Z = rng.standard_normal((reps, n)) * np.sqrt(var)
    w = 1.0 / var
    wmean = Z @ w / w.sum()
    return float(np.var(wmean, ddof=1) / np.var(Z.mean(axis=1), ddof=1))
