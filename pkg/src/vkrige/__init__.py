"""Veracity-score robust trend estimation, variogram fitting and kriging."""

from .errors import (
    ConvergenceError,
    DataError,
    DomainError,
    ParameterError,
    SingularSystemError,
    UndefinedBenchmarkError,
    UndefinedDispersionError,
    VKrigeError,
)
from .geo import Dataset, Observation, SpatialPoint, build_index, iqr, median, neighbors, quantile
from .kriging import (
    KrigingSystem,
    margin_of_error,
    ordinary_krige,
    pct_me_change,
    predict_vs,
    select_q,
    smooth_residuals_no_ref,
    smooth_residuals_with_ref,
)
from .trend import PsiSpec, TrendSpec, fit_robust_vs, fit_weighted_ls, r2_vs
from .variogram import VariogramModel, bin_lags, empirical_variogram, fit_wls, matern_cov
from .veracity import VeracityConfig, phi_exp, veracity_with_reference, veracity_without_reference

__version__ = "0.1.0"
