"""
Veracity-based residual smoothing, ordinary kriging and the combined
trend-plus-residual predictor.

Ordinary kriging works in semivariogram form. With ``G`` the matrix of
``gamma(s_i - s_j)`` and ``g`` the vector of ``gamma(s0 - s_i)`` the weights
are

    lam = G^-1 (g + 1 (1 - 1'G^-1 g) / (1'G^-1 1))

and the kriging variance is the usual ordinary-kriging BLUP variance

    g'G^-1 g - (1'G^-1 g - 1)^2 / (1'G^-1 1)

which equals ``lam'g + m`` for the Lagrange multiplier ``m`` of the
augmented system ``[G 1; 1' 0][lam; m] = [g; 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import DataError, ParameterError, SingularSystemError
from .geo import SpatialPoint, median, pairwise_distances
from .trend import TrendFit
from .variogram import VariogramModel, semivariogram

Z95 = 1.96


# --------------------------------------------------------------------------
# smoothing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothedResiduals:
    values: np.ndarray
    q: float
    provenance: str
    anchors: np.ndarray = field(repr=False, default=None)
    undefined: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.values)


def _smooth(resid, vs, q, anchors, provenance) -> SmoothedResiduals:
    if not q >= 0:
        raise ParameterError(f"smoothing exponent q must be non-negative, got {q}")
    resid = np.asarray(resid, dtype=float)
    vs = np.asarray(vs, dtype=float)
    undefined = ~np.isfinite(vs)
    v = np.where(undefined, 0.0, vs)
    # 0**0 == 1, so q = 0 leaves every residual untouched
    wq = np.power(v, q)
    out = wq * resid + (1.0 - wq) * anchors
    return SmoothedResiduals(out, float(q), provenance, anchors, undefined)


def no_ref_anchors(resid, neighborhoods) -> np.ndarray:
    resid = np.asarray(resid, dtype=float)
    return np.array([median(resid[h]) for h in neighborhoods])


def with_ref_anchors(neighbor_benchmarks, neighbor_design, beta) -> np.ndarray:
    """Median of ``xi_i - X_i beta`` for each site's neighbourhood."""
    beta = np.asarray(beta, dtype=float)
    return np.array(
        [median(np.asarray(xi) - np.asarray(Xi) @ beta) for xi, Xi in zip(neighbor_benchmarks, neighbor_design)]
    )


def smooth_residuals_no_ref(resid, vs, q: float, neighborhoods) -> SmoothedResiduals:
    """``V^q e_i + (1 - V^q) median(e over the neighbourhood of i)``.

    Undefined scores (NaN) are treated as 0, pulling those residuals fully
    onto the neighbourhood median (unless ``q == 0``).
    """
    return _smooth(resid, vs, q, no_ref_anchors(resid, neighborhoods), "no_ref")


def smooth_residuals_with_ref(
    resid, vs, q: float, neighbor_benchmarks, neighbor_design, beta
) -> SmoothedResiduals:
    """``V^q e_i + (1 - V^q) median(xi_i - X_i beta)``."""
    if isinstance(beta, TrendFit):
        beta = beta.beta
    anchors = with_ref_anchors(neighbor_benchmarks, neighbor_design, beta)
    return _smooth(resid, vs, q, anchors, "with_ref")


# --------------------------------------------------------------------------
# ordinary kriging
# --------------------------------------------------------------------------

@dataclass
class KrigingSystem:
    """Factorised ordinary-kriging system for a fixed set of sites and model.

    The factorisation is computed once and reused for any number of targets
    and residual vectors. ``jitter`` is the nugget-equivalent diagonal shift
    applied when the semivariogram matrix was numerically singular.
    """

    sites: np.ndarray
    model: VariogramModel
    jitter: float = 0.0

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float).reshape(-1, 2)
        n = self.sites.shape[0]
        if n == 0:
            raise DataError("ordinary kriging needs at least one site")
        if not all(math.isfinite(v) for v in self.model.theta):
            raise ParameterError("non-finite variogram model")
        _check_duplicates(self.sites)
        G = semivariogram(pairwise_distances(self.sites), self.model)
        self.gamma_matrix = G
        self._factor(G)

    def _factor(self, G):
        n = G.shape[0]
        self.jitter = 0.0
        if n == 1:
            self._lu = None
            self._ginv_one = None
            self._denom = None
            return
        scale = max(self.model.sill, 1e-300)
        anorm = np.linalg.norm(G, 1)
        jit = 0.0
        for attempt in range(4):
            # subtracting from the diagonal of G is the same as adding a tiny nugget
            A = G - jit * np.eye(n) if jit else G
            lu = scipy.linalg.lu_factor(A, check_finite=True)
            rcond, info = scipy.linalg.lapack.dgecon(lu[0], anorm, norm="1")
            if info == 0 and rcond > 1e-15 and np.all(np.diag(lu[0]) != 0):
                break
            jit = scale * 10.0 ** (-10 + 2 * attempt)
        else:
            raise SingularSystemError("semivariogram matrix is singular even after regularisation")
        self.jitter = jit
        self._lu = lu
        self._ginv_one = scipy.linalg.lu_solve(lu, np.ones(n))
        self._denom = float(np.sum(self._ginv_one))
        if self._denom == 0 or not math.isfinite(self._denom):
            raise SingularSystemError("1' G^-1 1 vanished; kriging system is degenerate")

    def gamma_vectors(self, targets) -> np.ndarray:
        """``(n_sites, n_targets)`` matrix of target-to-site semivariances."""
        targets = np.asarray(targets, dtype=float).reshape(-1, 2)
        return semivariogram(pairwise_distances(self.sites, targets), self.model)

    def weights(self, targets) -> tuple[np.ndarray, np.ndarray]:
        """Kriging weights ``(n_sites, n_targets)`` and variances."""
        g = self.gamma_vectors(targets)
        n = self.sites.shape[0]
        if n == 1:
            # lam = 1, Lagrange multiplier = gamma(s0 - s1)
            return np.ones((1, g.shape[1])), 2.0 * g[0]
        ginv_g = scipy.linalg.lu_solve(self._lu, g)
        one_ginv_g = self._ginv_one @ g  # 1'G^-1 g (G symmetric)
        lam = ginv_g + np.outer(self._ginv_one, (1.0 - one_ginv_g) / self._denom)
        var = np.einsum("ij,ij->j", g, ginv_g) - (one_ginv_g - 1.0) ** 2 / self._denom
        return lam, var

    def predict(self, targets, residuals) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        r = np.asarray(residuals, dtype=float).ravel()
        if r.size != self.sites.shape[0]:
            raise ParameterError(f"{r.size} residuals for {self.sites.shape[0]} sites")
        lam, var = self.weights(targets)
        if np.any(var < -1e-10 * max(self.model.sill, 1.0)):
            raise SingularSystemError(f"negative kriging variance {var.min():.3g}")
        var = np.clip(var, 0.0, None)
        return lam.T @ r, var, lam


def _check_duplicates(xy: np.ndarray):
    _, first, counts = np.unique(xy, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = xy[first[counts > 1]]
        raise SingularSystemError(f"duplicate kriging sites at {dup[:5].tolist()}")


def ordinary_krige(resid, sites, target, m: VariogramModel):
    """Predict the residual at ``target``.

    Returns ``(prediction, variance, weights)``.
    """
    values = resid.values if isinstance(resid, SmoothedResiduals) else resid
    if isinstance(target, SpatialPoint):
        target = target.as_array()
    system = KrigingSystem(sites, m)
    pred, var, lam = system.predict(np.atleast_2d(target), values)
    return float(pred[0]), float(var[0]), lam[:, 0]


# --------------------------------------------------------------------------
# combined predictor
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KrigingResult:
    target: SpatialPoint
    residual: float
    variance: float
    trend: float
    trend_se: float
    prediction: float
    margin_of_error: float


def margin_of_error(result_or_se, variance: float | None = None) -> float:
    """``1.96 * se_trend + 1.96 * sqrt(kriging variance)``."""
    if isinstance(result_or_se, KrigingResult):
        se, var = result_or_se.trend_se, result_or_se.variance
    else:
        se, var = result_or_se, variance
    return Z95 * se + Z95 * math.sqrt(max(var, 0.0))


def pct_me_change(me_vs, me_ref):
    me_vs = np.asarray(me_vs, dtype=float)
    me_ref = np.asarray(me_ref, dtype=float)
    if np.any(me_ref <= 0):
        raise ParameterError("reference margin of error must be positive")
    out = 100.0 * (me_vs - me_ref) / me_ref
    return float(out) if out.ndim == 0 else out


def predict_surface(targets, covariates, trend: TrendFit, resid, sites, m: VariogramModel,
                    system: KrigingSystem | None = None) -> dict:
    """Vectorised trend-plus-kriged-residual prediction at many targets."""
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    X0 = np.asarray(covariates, dtype=float).reshape(targets.shape[0], -1)
    if not np.all(np.isfinite(X0)):
        bad = np.where(~np.all(np.isfinite(X0), axis=1))[0]
        raise DataError(f"covariates missing at {len(bad)} targets, first rows {bad[:10].tolist()}")
    values = resid.values if isinstance(resid, SmoothedResiduals) else np.asarray(resid, dtype=float)
    system = system or KrigingSystem(sites, m)
    res_pred, var, _ = system.predict(targets, values)
    mean = trend.predict(X0)
    se = trend.predict_se(X0)
    me = Z95 * se + Z95 * np.sqrt(var)
    return {
        "xy": targets, "trend": mean, "trend_se": se, "residual": res_pred,
        "variance": var, "prediction": mean + res_pred, "me": me,
    }


def predict_vs(target, covariates, trend: TrendFit, resid, sites, m: VariogramModel) -> KrigingResult:
    """Trend at the target plus the ordinary-kriging residual prediction."""
    pt = target if isinstance(target, SpatialPoint) else SpatialPoint(*map(float, target))
    out = predict_surface(pt.as_array(), np.atleast_2d(covariates), trend, resid, sites, m)
    return KrigingResult(
        target=pt,
        residual=float(out["residual"][0]),
        variance=float(out["variance"][0]),
        trend=float(out["trend"][0]),
        trend_se=float(out["trend_se"][0]),
        prediction=float(out["prediction"][0]),
        margin_of_error=float(out["me"][0]),
    )


# --------------------------------------------------------------------------
# choosing the smoothing exponent
# --------------------------------------------------------------------------

DEFAULT_Q_GRID = (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0, 3.0)


@dataclass(frozen=True)
class StationsInRegion:
    """Score candidates by squared error at trusted test stations."""

    xy: np.ndarray
    covariates: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class HighVSLoocv:
    """Leave-one-out error over observations scoring at least ``threshold``."""

    threshold: float = 0.8


@dataclass
class QContext:
    """Everything ``select_q`` needs to rerun smoothing, fitting and kriging.

    ``smooth(q)`` returns the smoothed residuals; ``fit_model(smoothed)``
    returns the fitted variogram model.
    """

    sites: np.ndarray
    z: np.ndarray
    design: np.ndarray
    trend: TrendFit
    vs: np.ndarray
    smooth: Callable[[float], SmoothedResiduals]
    fit_model: Callable[[SmoothedResiduals], VariogramModel]


def q_score(q: float, ctx: QContext, test_mode) -> float:
    smoothed = ctx.smooth(q)
    model = ctx.fit_model(smoothed)
    if isinstance(test_mode, StationsInRegion):
        out = predict_surface(test_mode.xy, test_mode.covariates, ctx.trend, smoothed, ctx.sites, model)
        return float(np.mean((out["prediction"] - np.asarray(test_mode.values)) ** 2))
    test = np.where(np.nan_to_num(ctx.vs, nan=-1.0) >= test_mode.threshold)[0]
    n = len(ctx.z)
    errs = []
    for j in test:
        keep = np.arange(n) != j
        system = KrigingSystem(ctx.sites[keep], model)
        res, _, _ = system.predict(ctx.sites[j:j + 1], smoothed.values[keep])
        pred = ctx.trend.predict(ctx.design[j:j + 1])[0] + res[0]
        errs.append((ctx.z[j] - pred) ** 2)
    return float(np.mean(errs))


def select_q(candidates: Sequence[float], ctx: QContext | None = None, test_mode=None,
             return_scores: bool = False):
    """Candidate ``q`` minimising the test mean squared prediction error.

    Ties go to the smaller ``q``. A single candidate is returned without
    scoring.
    """
    cands = sorted(float(q) for q in candidates)
    if not cands:
        raise ParameterError("no candidate q values")
    if any(q < 0 for q in cands):
        raise ParameterError("candidate q values must be non-negative")
    if len(cands) == 1:
        return (cands[0], {cands[0]: float("nan")}) if return_scores else cands[0]
    if isinstance(test_mode, StationsInRegion):
        if len(np.asarray(test_mode.values)) == 0:
            raise ParameterError("no test stations inside the region; use HighVSLoocv instead")
    else:
        test_mode = test_mode or HighVSLoocv()
        n_test = int(np.sum(np.nan_to_num(ctx.vs, nan=-1.0) >= test_mode.threshold))
        if n_test == 0:
            raise ParameterError(
                f"no observations with VS >= {test_mode.threshold}; lower the threshold"
            )
    scores = {q: q_score(q, ctx, test_mode) for q in cands}
    best = cands[0]
    for q in cands[1:]:
        if scores[q] < scores[best]:
            best = q
    return (best, scores) if return_scores else best
