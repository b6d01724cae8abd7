"""
End-to-end prediction pipelines.

* ``fit_standard``: OLS trend, Matheron variogram, WLS fit, ordinary kriging.
* ``fit_vs``: veracity scores, VS-weighted robust trend, VS smoothing of the
  residuals, Cressie-Hawkins variogram, WLS fit, ordinary kriging.
* ``reference_surface``: the standard pipeline on high-quality data, wrapped
  as a callable prediction surface for benchmark construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .geo import Dataset
from .kriging import (
    DEFAULT_Q_GRID,
    HighVSLoocv,
    KrigingSystem,
    QContext,
    SmoothedResiduals,
    StationsInRegion,
    predict_surface,
    select_q,
    smooth_residuals_no_ref,
    smooth_residuals_with_ref,
)
from .trend import PsiSpec, TrendFit, TrendSpec, covariate_rows, design_matrix, fit_robust_vs, fit_weighted_ls
from .variogram import VariogramModel, bin_lags, empirical_variogram, fit_wls, initial_model
from .veracity import AdaptiveNu, VeracityConfig, VeracityReport, veracity_with_reference, veracity_without_reference


@dataclass(frozen=True)
class PipelineConfig:
    """Shared tuning for every pipeline.

    ``smoothness`` is the Matern smoothness; with ``fix_kappa`` it is held
    fixed during the fit, otherwise it only seeds the search.
    """

    spec: TrendSpec = field(default_factory=TrendSpec)
    family: str = "matern"
    smoothness: float = 0.5
    fix_kappa: bool = True
    bins: int = 15
    max_lag: float | None = None
    weight_mode: str = "cressie"
    psi: PsiSpec = field(default_factory=PsiSpec)
    veracity: VeracityConfig = field(default_factory=VeracityConfig)
    q: float | Sequence[float] = 1.0


@dataclass
class FittedPipeline:
    method: str
    data: Dataset
    trend: TrendFit
    model: VariogramModel
    residuals: np.ndarray
    system: KrigingSystem
    spec: TrendSpec
    q: float | None = None
    report: VeracityReport | None = None
    q_scores: dict | None = None

    def covariates(self, xy, elevation=None) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if elevation is None:
            elevation = np.full(xy.shape[0], np.nan)
        return covariate_rows(xy, elevation, self.spec)

    def predict(self, xy, elevation=None) -> dict:
        """Prediction dictionary (see ``predict_surface``) at ``xy``."""
        X0 = self.covariates(xy, elevation)
        return predict_surface(xy, X0, self.trend, self.residuals, self.data.xy, self.model, self.system)

    def __call__(self, xy, elevation=None) -> np.ndarray:
        return self.predict(xy, elevation)["prediction"]


def _fit_variogram(resid, xy, cfg: PipelineConfig, estimator: str) -> VariogramModel:
    bins = bin_lags(xy, cfg.bins, cfg.max_lag)
    emp = empirical_variogram(resid, xy, bins, estimator)
    init = initial_model(emp, cfg.family, cfg.smoothness)
    return fit_wls(emp, cfg.family, init=init, weight_mode=cfg.weight_mode, fix_kappa=cfg.fix_kappa).model


def fit_standard(data: Dataset, cfg: PipelineConfig = PipelineConfig(), method: str = "standard") -> FittedPipeline:
    X = design_matrix(data, cfg.spec)
    z = data.values
    trend = fit_weighted_ls(X, z)
    resid = z - trend.fitted
    model = _fit_variogram(resid, data.xy, cfg, "matheron")
    system = KrigingSystem(data.xy, model)
    return FittedPipeline(method, data, trend, model, resid, system, cfg.spec)


def reference_surface(ref: Dataset, cfg: PipelineConfig = PipelineConfig()) -> FittedPipeline:
    """Standard-pipeline fit on reference data, callable as ``(xy, elev) -> Yhat``.

    ``trend.adj_r2`` carries the adjusted R^2 used by adaptive mixing.
    """
    return fit_standard(ref, cfg, method="ref_only")


def score(data: Dataset, cfg: PipelineConfig = PipelineConfig(), ref: FittedPipeline | None = None) -> VeracityReport:
    if ref is None:
        return veracity_without_reference(data, cfg.veracity)
    return veracity_with_reference(data, ref, cfg.veracity)


def adaptive_nu_for(ref: FittedPipeline) -> AdaptiveNu:
    """Adaptive mixing driven by the reference fit's adjusted R^2."""
    return AdaptiveNu(_clip_r2(ref.trend.adj_r2))


def _clip_r2(r2: float) -> float:
    return 0.0 if not np.isfinite(r2) else float(min(max(r2, 0.0), 1.0))


def fit_vs(
    data: Dataset,
    cfg: PipelineConfig = PipelineConfig(),
    ref: FittedPipeline | None = None,
    report: VeracityReport | None = None,
    q_test=None,
) -> FittedPipeline:
    """VS pipeline; ``cfg.q`` may be a single exponent or candidates.

    With several candidates ``q_test`` picks the selection mode
    (``StationsInRegion`` or ``HighVSLoocv``, the default).
    """
    X = design_matrix(data, cfg.spec)
    z = data.values
    xy = data.xy
    if report is None:
        report = score(data, cfg, ref)
    vs = report.weights()
    trend = fit_robust_vs(X, z, vs, cfg.psi)
    resid = z - trend.fitted
    hoods = report.neighborhoods
    if report.with_reference:
        neigh_X = [X[h] for h in hoods]

        def smooth(q):
            return smooth_residuals_with_ref(resid, report.vs, q, report.neighbor_benchmarks, neigh_X, trend.beta)
    else:
        def smooth(q):
            return smooth_residuals_no_ref(resid, report.vs, q, hoods)

    def fit_model(sm: SmoothedResiduals):
        return _fit_variogram(sm.values, xy, cfg, "cressie_hawkins")

    qs = [cfg.q] if np.isscalar(cfg.q) else list(cfg.q)
    scores = None
    if len(qs) == 1:
        q = float(qs[0])
    else:
        ctx = QContext(xy, z, X, trend, report.vs, smooth, fit_model)
        q, scores = select_q(qs, ctx, q_test or HighVSLoocv(), return_scores=True)
    sm = smooth(q)
    model = fit_model(sm)
    system = KrigingSystem(xy, model)
    return FittedPipeline("vs", data, trend, model, sm.values, system, cfg.spec, q, report, scores)


def stations_in_region(stations: Dataset, region: Dataset, spec: TrendSpec) -> StationsInRegion:
    """Test stations from ``stations`` that fall inside ``region``'s bounding box."""
    bb = region.bbox
    if bb is None:
        raise ParameterError("empty region")
    xy = stations.xy
    inside = (xy[:, 0] >= bb.xmin) & (xy[:, 0] <= bb.xmax) & (xy[:, 1] >= bb.ymin) & (xy[:, 1] <= bb.ymax)
    idx = np.where(inside)[0]
    X = covariate_rows(xy[idx], stations.elevation[idx], spec)
    return StationsInRegion(xy[idx], X, stations.values[idx])


__all__ = [
    "DEFAULT_Q_GRID",
    "FittedPipeline",
    "PipelineConfig",
    "adaptive_nu_for",
    "fit_standard",
    "fit_vs",
    "reference_surface",
    "score",
    "stations_in_region",
]
