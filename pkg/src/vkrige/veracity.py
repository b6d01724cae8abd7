"""
Veracity scores for noisy point observations.

A veracity score (VS) is ``phi(|Z - xi| / (alpha + D))`` where ``xi`` is a
local benchmark for the process at the site, ``D`` a robust dispersion of
the neighbourhood and ``alpha`` a baseline deviation in process units.
Two benchmarks are supported:

* with a reference surface ``Yhat`` (kriged from high-quality data):
  ``xi(s_i) = Yhat(s_i) + (1 - nu) * median(Z_i - Yhat_i)`` and ``D`` is the
  IQR of the benchmark values over the neighbourhood;
* without reference: ``xi(s_i) = median(Z_i)`` and ``D = IQR(Z_i)``.

A score is only defined when the neighbourhood (which includes the site
itself) holds at least 3 observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import DomainError, ParameterError, UndefinedBenchmarkError
from .geo import Dataset, build_index, iqr, median

MIN_NEIGHBORS = 3


def phi_exp(x):
    """Exponential veracity function ``exp(-x)`` for ``x >= 0``."""
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("veracity function argument must be non-negative")
    # floored so that scores stay strictly positive after underflow
    out = np.maximum(np.exp(-arr), np.finfo(float).tiny)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AdaptiveNu:
    """Per-site mixing ``nu = 1 - exp(-1 / ((1 - R^2) sqrt(n_i)))``."""

    r_squared: float

    def __post_init__(self):
        if not 0.0 <= self.r_squared <= 1.0:
            raise ParameterError(f"R^2 for adaptive nu must lie in [0, 1], got {self.r_squared}")


NuMode = Union[float, AdaptiveNu]


@dataclass(frozen=True)
class VeracityConfig:
    alpha: float = 3.0
    delta: float = 0.08
    phi: Callable = phi_exp
    nu: NuMode = 0.5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not self.delta > 0:
            raise ParameterError(f"delta must be positive, got {self.delta}")
        if not isinstance(self.nu, AdaptiveNu) and not 0.0 <= float(self.nu) <= 1.0:
            raise ParameterError(f"fixed nu must lie in [0, 1], got {self.nu}")

    def nu_for(self, n_i: int) -> float:
        if isinstance(self.nu, AdaptiveNu):
            return mixing_nu(self.nu.r_squared, n_i)
        return float(self.nu)


@dataclass(frozen=True)
class VeracityReport:
    """Per-observation scoring output.

    ``vs`` is NaN where the score is undefined (``defined`` is False).
    ``neighborhoods[i]`` lists the indices in the delta-neighbourhood of site
    ``i``; ``neighbor_benchmarks[i]`` holds the benchmark values over that
    neighbourhood (the vector whose IQR enters the score with a reference,
    the raw neighbourhood values without one).
    """

    vs: np.ndarray
    defined: np.ndarray
    benchmark: np.ndarray
    scaled_deviation: np.ndarray
    n_neighbors: np.ndarray
    nu: np.ndarray
    neighborhoods: tuple
    neighbor_benchmarks: tuple
    with_reference: bool

    def weights(self) -> np.ndarray:
        """Scores usable as regression weights (0 where undefined)."""
        return np.where(self.defined, self.vs, 0.0)


def mixing_nu(r_squared: float, n_i: float) -> float:
    if not 0.0 <= r_squared <= 1.0:
        raise ParameterError(f"R^2 must lie in [0, 1], got {r_squared}")
    if n_i < 1:
        raise ParameterError(f"neighbourhood count must be >= 1, got {n_i}")
    if r_squared == 1.0:
        return 1.0
    return 1.0 - math.exp(-1.0 / ((1.0 - r_squared) * math.sqrt(n_i)))


def benchmark_with_reference(z_neigh, yhat_i: float, yhat_neigh, nu: float) -> float:
    z_neigh = np.asarray(z_neigh, dtype=float)
    yhat_neigh = np.asarray(yhat_neigh, dtype=float)
    if z_neigh.size < MIN_NEIGHBORS:
        raise UndefinedBenchmarkError(f"benchmark needs {MIN_NEIGHBORS} neighbours, got {z_neigh.size}")
    if z_neigh.shape != yhat_neigh.shape:
        raise ParameterError("z and reference neighbourhood vectors differ in length")
    return float(yhat_i + (1.0 - nu) * median(z_neigh - yhat_neigh))


def _score(phi, dev: float, alpha: float, disp: float) -> tuple[float, float]:
    scaled = abs(dev) / (alpha + disp)
    return float(phi(scaled)), scaled


def veracity_without_reference(data: Dataset, cfg: VeracityConfig) -> VeracityReport:
    z = data.values
    n = len(z)
    hoods = build_index(data, cfg.delta).all_neighborhoods()
    vs = np.full(n, np.nan)
    bench = np.full(n, np.nan)
    scaled = np.full(n, np.nan)
    counts = np.array([len(h) for h in hoods], dtype=int)
    for i, hood in enumerate(hoods):
        if counts[i] < MIN_NEIGHBORS:
            continue
        zi = z[hood]
        bench[i] = median(zi)
        vs[i], scaled[i] = _score(cfg.phi, z[i] - bench[i], cfg.alpha, iqr(zi))
    return VeracityReport(
        vs=vs,
        defined=counts >= MIN_NEIGHBORS,
        benchmark=bench,
        scaled_deviation=scaled,
        n_neighbors=counts,
        nu=np.zeros(n),
        neighborhoods=tuple(hoods),
        neighbor_benchmarks=tuple(z[h] for h in hoods),
        with_reference=False,
    )


def veracity_with_reference(data: Dataset, ref_surface: Callable, cfg: VeracityConfig) -> VeracityReport:
    """Score ``data`` against a reference prediction surface.

    Parameters
    ----------
    data : Dataset
        Noisy observations ``Z``.
    ref_surface : callable
        ``ref_surface(xy, elevation) -> array`` evaluating the reference
        prediction at an ``(k, 2)`` array of locations; ``elevation`` is the
        matching array (NaN where unknown).
    cfg : VeracityConfig

    Notes
    -----
    The benchmark vector entering the dispersion term of site ``i`` is
    built by evaluating the benchmark at each neighbour ``j`` with site
    ``i``'s mixing weight. A neighbour whose own neighbourhood is too small
    for a local correction contributes the bare reference value.
    """
    z = data.values
    n = len(z)
    yhat = np.asarray(ref_surface(data.xy, data.elevation), dtype=float).ravel()
    if yhat.shape != (n,) or not np.all(np.isfinite(yhat)):
        raise DomainError("reference surface must return finite values at every site")
    hoods = build_index(data, cfg.delta).all_neighborhoods()
    counts = np.array([len(h) for h in hoods], dtype=int)
    # median of Z - Yhat over each neighbourhood, NaN where too small
    local_corr = np.array(
        [median(z[h] - yhat[h]) if len(h) >= MIN_NEIGHBORS else np.nan for h in hoods]
    )

    vs = np.full(n, np.nan)
    bench = np.full(n, np.nan)
    scaled = np.full(n, np.nan)
    nus = np.array([cfg.nu_for(max(c, 1)) for c in counts])
    neigh_bench = []
    for i, hood in enumerate(hoods):
        w = 1.0 - nus[i]
        corr = np.where(np.isnan(local_corr[hood]), 0.0, local_corr[hood])
        xi_vec = yhat[hood] + w * corr
        neigh_bench.append(xi_vec)
        if counts[i] < MIN_NEIGHBORS:
            continue
        bench[i] = yhat[i] + w * local_corr[i]
        vs[i], scaled[i] = _score(cfg.phi, z[i] - bench[i], cfg.alpha, iqr(xi_vec))
    return VeracityReport(
        vs=vs,
        defined=counts >= MIN_NEIGHBORS,
        benchmark=bench,
        scaled_deviation=scaled,
        n_neighbors=counts,
        nu=nus,
        neighborhoods=tuple(hoods),
        neighbor_benchmarks=tuple(neigh_bench),
        with_reference=True,
    )
