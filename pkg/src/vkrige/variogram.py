"""
Semivariogram models, empirical estimators and weighted least-squares fits.

Model parameters follow the ``theta = (nugget, partial_sill, range,
smoothness)`` convention. The Matern covariance is

    C(d) = sill * 2^(1-k) / Gamma(k) * (sqrt(2k) d / rho)^k * K_k(sqrt(2k) d / rho)
           + nugget * 1(d == 0)

and every family's semivariogram is ``gamma(d) = nugget + sill - C0(d)`` for
``d > 0`` with ``gamma(0) = 0``, ``C0`` being the nugget-free covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize
import scipy.special
from scipy.spatial.distance import pdist

from .errors import DomainError, ParameterError

FAMILIES = ("matern", "exponential", "spherical", "gaussian")
KAPPA_BOUNDS = (0.1, 10.0)
_GAMMA_FLOOR = 1e-12


@dataclass(frozen=True)
class VariogramModel:
    family: str = "matern"
    nugget: float = 0.0
    partial_sill: float = 1.0
    range: float = 1.0
    smoothness: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown variogram family {self.family!r}")
        vals = (self.nugget, self.partial_sill, self.range, self.smoothness)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError(f"non-finite variogram parameters {vals}")
        if self.nugget < 0 or self.partial_sill < 0:
            raise ParameterError("nugget and partial sill must be non-negative")
        if not self.range > 0:
            raise ParameterError("range must be positive")
        if self.family == "matern" and not self.smoothness > 0:
            raise ParameterError("Matern smoothness must be positive")

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    @property
    def theta(self) -> tuple[float, float, float, float]:
        return (self.nugget, self.partial_sill, self.range, self.smoothness)

    def covariance(self, d):
        return covariance(d, self)

    def semivariogram(self, d):
        return semivariogram(d, self)


# --------------------------------------------------------------------------
# Bessel function and covariance families
# --------------------------------------------------------------------------

def bessel_k(order: float, x: float) -> float:
    """Modified Bessel function of the second kind ``K_order(x)``.

    Valid for ``0 < order <= 50`` and ``1e-8 < x < 700``.
    """
    if not (0 < order <= 50):
        raise DomainError(f"Bessel order {order} outside (0, 50]")
    if not (1e-8 < x < 700):
        raise DomainError(f"Bessel argument {x} outside (1e-8, 700)")
    return float(scipy.special.kv(order, x))


def _matern_correlation(d: np.ndarray, rho: float, kappa: float) -> np.ndarray:
    out = np.ones_like(d)
    t = math.sqrt(2.0 * kappa) * d / rho
    pos = t > 0
    tp = t[pos]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        # log of 2^(1-k)/Gamma(k) t^k K_k(t), via the scaled Bessel kve
        logc = (
            (1.0 - kappa) * math.log(2.0)
            - scipy.special.gammaln(kappa)
            + kappa * np.log(tp)
            + np.log(scipy.special.kve(kappa, tp))
            - tp
        )
        vals = np.exp(logc)
    # overflow only happens as t -> 0 (limit 1), underflow as t -> inf
    vals = np.where(np.isfinite(vals), vals, np.where(tp < 1.0, 1.0, 0.0))
    out[pos] = np.minimum(vals, 1.0)
    return out


def correlation(d, m: VariogramModel) -> np.ndarray:
    """Nugget-free correlation ``C0(d) / partial_sill``."""
    d = np.abs(np.asarray(d, dtype=float))
    if m.family == "matern":
        return _matern_correlation(d, m.range, m.smoothness)
    h = d / m.range
    if m.family == "exponential":
        return np.exp(-h)
    if m.family == "gaussian":
        return np.exp(-(h**2))
    return np.where(h < 1, 1 - 1.5 * h + 0.5 * h**3, 0.0)


def covariance(d, m: VariogramModel):
    d = np.asarray(d, dtype=float)
    out = m.partial_sill * correlation(d, m) + m.nugget * (d == 0)
    return float(out) if out.ndim == 0 else out


def matern_cov(d, m: VariogramModel):
    if m.family != "matern":
        raise ParameterError(f"matern_cov called with a {m.family} model")
    return covariance(d, m)


def semivariogram(d, m: VariogramModel):
    d = np.abs(np.asarray(d, dtype=float))
    out = np.where(d > 0, m.nugget + m.partial_sill * (1.0 - correlation(d, m)), 0.0)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Lag binning and empirical estimators
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LagBins:
    """Equal-width partition of ``(0, max_lag]`` with pair membership.

    ``pair_i``, ``pair_j`` and ``pair_bin`` list every site pair whose
    distance falls in a bin; ``lags`` is the mean member distance (the bin
    midpoint for empty bins, which are flagged by ``counts == 0``).
    """

    edges: np.ndarray
    lags: np.ndarray
    counts: np.ndarray
    pair_i: np.ndarray = field(repr=False)
    pair_j: np.ndarray = field(repr=False)
    pair_bin: np.ndarray = field(repr=False)
    n_sites: int = 0

    @property
    def K(self) -> int:
        return len(self.counts)

    @property
    def nonempty(self) -> np.ndarray:
        return self.counts > 0


def default_max_lag(sites) -> float:
    xy = np.asarray(sites, dtype=float).reshape(-1, 2)
    if xy.shape[0] < 2:
        raise ParameterError("need at least 2 sites")
    return 0.5 * float(pdist(xy).max())


def bin_lags(sites, K: int = 15, max_lag: float | None = None) -> LagBins:
    xy = np.asarray(sites, dtype=float).reshape(-1, 2)
    n = xy.shape[0]
    if n < 2:
        raise ParameterError("lag binning needs at least 2 sites")
    if K < 1:
        raise ParameterError(f"bin count must be >= 1, got {K}")
    if max_lag is None:
        max_lag = default_max_lag(xy)
    if not max_lag > 0:
        raise ParameterError(f"max_lag must be positive, got {max_lag}")
    edges = np.linspace(0.0, max_lag, K + 1)
    edges[-1] = max_lag
    iu, ju = np.triu_indices(n, k=1)
    d = pdist(xy)  # same (i<j) row-major order as triu_indices
    keep = (d > 0) & (d <= max_lag)
    iu, ju, d = iu[keep], ju[keep], d[keep]
    # bin u holds (edges[u], edges[u+1]]
    b = np.searchsorted(edges, d, side="left") - 1
    counts = np.bincount(b, minlength=K)
    sums = np.bincount(b, weights=d, minlength=K)
    mids = 0.5 * (edges[:-1] + edges[1:])
    lags = np.where(counts > 0, sums / np.maximum(counts, 1), mids)
    return LagBins(edges, lags, counts, iu, ju, b, n)


@dataclass(frozen=True)
class EmpiricalVariogram:
    bins: LagBins
    gamma: np.ndarray
    estimator: str

    @property
    def lags(self) -> np.ndarray:
        return self.bins.lags

    @property
    def counts(self) -> np.ndarray:
        return self.bins.counts

    @property
    def empty(self) -> np.ndarray:
        return self.bins.counts == 0


def _pair_diffs(residuals, bins: LagBins) -> np.ndarray:
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size != bins.n_sites:
        raise ParameterError(f"{r.size} residuals for bins built on {bins.n_sites} sites")
    return r[bins.pair_i] - r[bins.pair_j]


def empirical_matheron(residuals, sites, bins: LagBins) -> EmpiricalVariogram:
    """Method-of-moments estimate ``sum (e_i - e_j)^2 / (2 |N(h)|)`` per bin."""
    diff = _pair_diffs(residuals, bins)
    sums = np.bincount(bins.pair_bin, weights=diff**2, minlength=bins.K)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(bins.counts > 0, sums / (2.0 * bins.counts), np.nan)
    return EmpiricalVariogram(bins, gamma, "matheron")


def empirical_cressie_hawkins(residuals, sites, bins: LagBins) -> EmpiricalVariogram:
    """Cressie-Hawkins robust estimate.

    ``0.5 * {sum |e_i - e_j|^(1/2) / |N|}^4 / (0.457 + 0.494 / |N|)`` per bin,
    approximately unbiased for Gaussian increments (so it tracks the
    Matheron estimate on clean data).
    """
    diff = _pair_diffs(residuals, bins)
    sums = np.bincount(bins.pair_bin, weights=np.sqrt(np.abs(diff)), minlength=bins.K)
    N = bins.counts.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(N > 0, 0.5 * (sums / N) ** 4 / (0.457 + 0.494 / N), np.nan)
    return EmpiricalVariogram(bins, gamma, "cressie_hawkins")


ESTIMATORS = {"matheron": empirical_matheron, "cressie_hawkins": empirical_cressie_hawkins}


def empirical_variogram(residuals, sites, bins: LagBins, estimator: str = "cressie_hawkins"):
    try:
        fn = ESTIMATORS[estimator]
    except KeyError:
        raise ParameterError(f"unknown estimator {estimator!r}") from None
    return fn(residuals, sites, bins)


# --------------------------------------------------------------------------
# Weighted least-squares fitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VariogramFit:
    model: VariogramModel
    objective: float
    converged: bool
    n_eval: int


WEIGHT_MODES = ("cressie", "npairs", "uniform")


def wls_objective(emp: EmpiricalVariogram, m: VariogramModel, weight_mode: str = "cressie") -> float:
    """Weighted squared misfit between empirical and model semivariances.

    ``cressie`` weights bin ``u`` by ``|N(h_u)| / gamma(h_u; theta)^2`` (with
    the model value floored at 1e-12), ``npairs`` by ``|N(h_u)|`` and
    ``uniform`` by 1. Empty bins are skipped.
    """
    ok = ~emp.empty
    h = emp.lags[ok]
    g_hat = emp.gamma[ok]
    n = emp.counts[ok].astype(float)
    g = semivariogram(h, m)
    if weight_mode == "cressie":
        w = n / np.maximum(g, _GAMMA_FLOOR) ** 2
    elif weight_mode == "npairs":
        w = n
    elif weight_mode == "uniform":
        w = np.ones_like(n)
    else:
        raise ParameterError(f"unknown weight mode {weight_mode!r}")
    return float(np.sum(w * (g_hat - g) ** 2))


def _kappa_to_u(k: float) -> float:
    lo, hi = KAPPA_BOUNDS
    p = (min(max(k, lo * 1.0001), hi * 0.9999) - lo) / (hi - lo)
    return math.log(p / (1 - p))


def _u_to_kappa(u: float) -> float:
    lo, hi = KAPPA_BOUNDS
    return lo + (hi - lo) / (1.0 + math.exp(-u))


def initial_model(emp: EmpiricalVariogram, family: str = "matern", smoothness: float = 0.5) -> VariogramModel:
    """Data-driven starting values: plateau level for the sill, a third of
    the largest lag for the range and a small nugget."""
    ok = ~emp.empty & np.isfinite(emp.gamma)
    g = emp.gamma[ok]
    h = emp.lags[ok]
    if g.size == 0:
        raise ParameterError("empirical variogram has no non-empty bins")
    tail = g[len(g) // 2:] if g.size > 1 else g
    sill = max(float(np.mean(tail)), 1e-8)
    nug = max(min(float(g[0]) * 0.5, 0.5 * sill), 0.0)
    return VariogramModel(
        family, nugget=0.1 * nug, partial_sill=max(sill - 0.1 * nug, 1e-8),
        range=max(float(h.max()) / 3.0, 1e-6), smoothness=smoothness,
    )


def fit_wls(
    emp: EmpiricalVariogram,
    family: str = "matern",
    init: VariogramModel | None = None,
    weight_mode: str = "cressie",
    fix_kappa: bool = True,
    fix_nugget: float | None = None,
    n_starts: int = 3,
    max_iter: int = 4000,
) -> VariogramFit:
    """Fit a parametric semivariogram by weighted least squares.

    Nelder-Mead searches over ``sqrt(nugget)``, ``log(partial_sill)``,
    ``log(range)`` and (when ``fix_kappa`` is False, Matern only) a logistic
    transform of the smoothness onto ``[0.1, 10]``. The nugget is
    parameterised through its square root so that a zero nugget is
    reachable; ``fix_nugget`` pins it instead. Starts are the initial model
    and two range/sill perturbations; the best end point is restarted until
    the objective stops improving.
    """
    if weight_mode not in WEIGHT_MODES:
        raise ParameterError(f"unknown weight mode {weight_mode!r}")
    if init is None:
        init = initial_model(emp, family)
    elif init.family != family:
        init = replace(init, family=family)
    free_kappa = family == "matern" and not fix_kappa
    n_free = 2 + (fix_nugget is None) + free_kappa
    if int(np.count_nonzero(~emp.empty)) < n_free:
        raise ParameterError(
            f"{int(np.count_nonzero(~emp.empty))} non-empty bins for {n_free} free parameters"
        )
    scale = max(init.sill, 1e-12)

    def unpack(u):
        i = 0
        if fix_nugget is None:
            nug = float(scale * u[0] ** 2)
            i = 1
        else:
            nug = fix_nugget
        ps = math.exp(u[i])
        rg = math.exp(u[i + 1])
        kap = _u_to_kappa(u[i + 2]) if free_kappa else init.smoothness
        return nug, ps, rg, kap

    def to_model(u):
        nug, ps, rg, kap = unpack(u)
        return VariogramModel(family, nug, ps, rg, kap)

    n_eval = 0
    f_scale = 1.0

    def objective(u):
        nonlocal n_eval
        n_eval += 1
        nug, ps, rg, kap = unpack(u)
        if not all(math.isfinite(v) for v in (nug, ps, rg, kap)) or ps > 1e300 or rg > 1e300:
            return float("inf")
        m = VariogramModel(family, nug, ps, rg, kap)
        val = wls_objective(emp, m, weight_mode) / f_scale
        return val if math.isfinite(val) else float("inf")

    def pack(m: VariogramModel, sill_mult=1.0, range_mult=1.0):
        u = []
        if fix_nugget is None:
            u.append(math.sqrt(max(m.nugget, 0.0) / scale))
        u.append(math.log(max(m.partial_sill * sill_mult, 1e-300)))
        u.append(math.log(m.range * range_mult))
        if free_kappa:
            u.append(_kappa_to_u(m.smoothness))
        return np.array(u)

    starts = [pack(init), pack(init, 1.5, 0.5), pack(init, 0.75, 2.0)][: max(n_starts, 1)]
    # optimise the objective relative to its starting value so that the
    # stopping tolerance does not depend on the scale of the data
    f0 = objective(starts[0])
    f_scale = f0 if math.isfinite(f0) and f0 > 0 else 1.0
    opts = {"xatol": 1e-12, "fatol": 1e-18, "maxiter": max_iter, "maxfev": 2 * max_iter}
    best = None
    for u0 in starts:
        res = scipy.optimize.minimize(objective, u0, method="Nelder-Mead", options=opts)
        if best is None or res.fun < best.fun:
            best = res
    converged = bool(best.success)
    for _ in range(5):
        res = scipy.optimize.minimize(objective, best.x, method="Nelder-Mead", options=opts)
        improved = res.fun < best.fun * (1 - 1e-12) - 1e-300
        if res.fun <= best.fun:
            best = res
            converged = bool(res.success)
        if not improved:
            break
    return VariogramFit(to_model(best.x), float(best.fun) * f_scale, converged, n_eval)
