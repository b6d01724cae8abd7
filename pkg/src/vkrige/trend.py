"""
Mean-function estimation: ordinary / weighted least squares and the
veracity-weighted robust M-estimator solved by IRLS.

The robust objective is ``sum_i vs_i * rho(r_i / s)``, minimised by
iterating weighted least squares with weights ``vs_i * psi(u_i) / u_i``
where ``u_i = r_i / s`` and ``s`` is the normalised VS-weighted median
absolute residual, re-estimated every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import DataError, ParameterError, SingularSystemError
from .geo import Dataset

TERMS = ("intercept", "x", "y", "xy", "elevation")

# 1 / Phi^{-1}(3/4): makes the median absolute residual consistent for sigma
MAD_CONSTANT = 1.482602218505602


@dataclass(frozen=True)
class TrendSpec:
    terms: tuple[str, ...] = ("intercept", "x", "y", "elevation")

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        unknown = [t for t in terms if t not in TERMS]
        if unknown:
            raise ParameterError(f"unknown trend terms {unknown}; choose from {TERMS}")
        if "intercept" not in terms:
            raise ParameterError("trend spec must include the intercept")
        if len(set(terms)) != len(terms):
            raise ParameterError(f"duplicate trend terms in {terms}")

    @classmethod
    def parse(cls, text: str) -> "TrendSpec":
        return cls(tuple(t.strip() for t in text.split(",") if t.strip()))

    @property
    def needs_elevation(self) -> bool:
        return "elevation" in self.terms

    def __len__(self) -> int:
        return len(self.terms)


def covariate_rows(xy, elevation, spec: TrendSpec) -> np.ndarray:
    """Evaluate the covariate vector ``x(s)`` at each location."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    n = xy.shape[0]
    elev = np.full(n, np.nan) if elevation is None else np.asarray(elevation, dtype=float).ravel()
    cols = []
    for term in spec.terms:
        if term == "intercept":
            cols.append(np.ones(n))
        elif term == "x":
            cols.append(xy[:, 0])
        elif term == "y":
            cols.append(xy[:, 1])
        elif term == "xy":
            cols.append(xy[:, 0] * xy[:, 1])
        else:
            cols.append(elev)
    return np.column_stack(cols) if cols else np.empty((n, 0))


def design_matrix(data: Dataset, spec: TrendSpec) -> np.ndarray:
    if spec.needs_elevation:
        missing = [o.id for o in data.observations if o.elevation is None]
        if missing:
            raise DataError(f"elevation missing for ids {missing[:20]}")
    return covariate_rows(data.xy, data.elevation, spec)


# --------------------------------------------------------------------------
# psi functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PsiSpec:
    """Robust loss family and tuning.

    ``family`` is one of ``squared``, ``huber`` (``k``), ``bisquare`` (``c``)
    or ``lqq`` (``b``, ``c``, ``s``). The lqq defaults are the widely used
    95%-efficiency constants; callers with a different target efficiency
    should pass their own.
    """

    family: str = "huber"
    k: float = 1.345
    c: float = 4.685
    lqq: tuple[float, float, float] = (1.4734061, 0.9822707, 1.5)

    def __post_init__(self):
        if self.family not in ("squared", "huber", "bisquare", "lqq"):
            raise ParameterError(f"unknown psi family {self.family!r}")
        consts = {"huber": (self.k,), "bisquare": (self.c,), "lqq": self.lqq}.get(self.family, ())
        if any(not v > 0 for v in consts):
            raise ParameterError(f"{self.family} tuning constants must be positive: {consts}")
        if self.family == "lqq" and not self.lqq[2] > 1:
            raise ParameterError("lqq slope parameter s must exceed 1")

    def psi(self, u):
        u = np.asarray(u, dtype=float)
        if self.family == "squared":
            return u.copy()
        if self.family == "huber":
            return np.clip(u, -self.k, self.k)
        if self.family == "bisquare":
            t = u / self.c
            return np.where(np.abs(t) < 1, u * (1 - t**2) ** 2, 0.0)
        return _lqq_psi(u, *self.lqq)

    def weight(self, u):
        """``psi(u) / u`` with the limit 1 at zero."""
        u = np.asarray(u, dtype=float)
        out = np.ones_like(u)
        nz = u != 0
        out[nz] = self.psi(u[nz]) / u[nz]
        return out

    def rho(self, u):
        u = np.asarray(u, dtype=float)
        if self.family == "squared":
            return 0.5 * u**2
        if self.family == "huber":
            a = np.abs(u)
            return np.where(a <= self.k, 0.5 * u**2, self.k * a - 0.5 * self.k**2)
        if self.family == "bisquare":
            t2 = np.minimum((u / self.c) ** 2, 1.0)
            return self.c**2 / 6.0 * (1 - (1 - t2) ** 3)
        return _lqq_rho(u, *self.lqq)


def _lqq_psi(u, b, c, s):
    a = (2 * c + 2 * b - b * s) / (s - 1)
    x = np.abs(u)
    out = np.zeros_like(x)
    m1 = x <= c
    m2 = (x > c) & (x <= b + c)
    m3 = (x > b + c) & (x <= a + b + c)
    out[m1] = x[m1]
    out[m2] = x[m2] - s / (2 * b) * (x[m2] - c) ** 2
    t = x[m3] - b - c
    out[m3] = c + b - b * s / 2 + (s - 1) / a * (0.5 * t**2 - a * t)
    return np.sign(u) * out


def _lqq_rho(u, b, c, s):
    # integral of psi from 0 to |u|, piecewise
    a = (2 * c + 2 * b - b * s) / (s - 1)
    x = np.abs(u)
    r1 = 0.5 * np.minimum(x, c) ** 2
    t2 = np.clip(x - c, 0, b)
    r2 = c * t2 + 0.5 * t2**2 - s / (6 * b) * t2**3
    t3 = np.clip(x - b - c, 0, a)
    top = c + b - b * s / 2
    r3 = top * t3 + (s - 1) / a * (t3**3 / 6 - a * t3**2 / 2)
    return r1 + r2 + r3


SQUARED = PsiSpec("squared")


# --------------------------------------------------------------------------
# fits
# --------------------------------------------------------------------------

@dataclass
class TrendFit:
    beta: np.ndarray
    weights: np.ndarray
    psi: PsiSpec
    fitted: np.ndarray
    residuals: np.ndarray
    cov: np.ndarray
    scale: float = float("nan")
    r2_vs: float = float("nan")
    adj_r2: float = float("nan")
    converged: bool = True
    n_iter: int = 0
    objective_trace: list = field(default_factory=list)
    spec: TrendSpec | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def predict(self, X0) -> np.ndarray:
        return np.asarray(X0, dtype=float) @ self.beta

    def predict_se(self, X0) -> np.ndarray:
        """Standard error of ``x0' beta`` for each row of ``X0``."""
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        return np.sqrt(np.clip(np.einsum("ij,jk,ik->i", X0, self.cov, X0), 0, None))


def _wls_solve(X: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    keep = w > 0
    Xw = X[keep] * np.sqrt(w[keep])[:, None]
    zw = z[keep] * np.sqrt(w[keep])
    p = X.shape[1]
    if Xw.shape[0] < p or np.linalg.matrix_rank(Xw) < p:
        raise SingularSystemError(
            f"design has rank < {p} on the {int(keep.sum())} positively weighted rows"
        )
    beta, *_ = scipy.linalg.lstsq(Xw, zw, lapack_driver="gelsd")
    return beta


def sandwich_cov(X: np.ndarray, resid: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Heteroskedasticity-robust ``(X'WX)^-1 X'W diag(r^2) W X (X'WX)^-1``."""
    XtW = X.T * w
    bread = np.linalg.pinv(XtW @ X)
    meat = (XtW * resid**2) @ XtW.T
    return bread @ meat @ bread


def _validate(X, z, w):
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != z.size or w.size != z.size:
        raise ParameterError(f"shape mismatch: X {X.shape}, z {z.shape}, w {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ParameterError("weights must be finite and non-negative")
    return X, z, w


def fit_weighted_ls(X, z, w=None) -> TrendFit:
    """Minimise ``sum w_i (z_i - x_i' beta)^2``; ``w`` defaults to ones (OLS)."""
    if w is None:
        w = np.ones(len(z))
    X, z, w = _validate(X, z, w)
    beta = _wls_solve(X, z, w)
    fitted = X @ beta
    resid = z - fitted
    fit = TrendFit(
        beta=beta, weights=w, psi=SQUARED, fitted=fitted, residuals=resid,
        cov=sandwich_cov(X, resid, w), converged=True, n_iter=1,
    )
    fit.r2_vs = r2_vs(z, fitted, w)
    fit.adj_r2 = adjusted_r2(z, fitted, w, X.shape[1])
    return fit


def weighted_median(values, weights) -> float:
    """Median of ``values`` under non-negative ``weights``.

    The lower and upper weighted medians are averaged, so equal weights
    reproduce the ordinary median and weights below ~1e-9 of the total act
    like deletion.
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(v, kind="stable")
    v, cum = v[order], np.cumsum(w[order])
    half = 0.5 * cum[-1]
    lo = int(np.searchsorted(cum, half * (1 - 1e-9), side="left"))
    hi = int(np.searchsorted(cum, half * (1 + 1e-9), side="right"))
    hi = min(hi, len(v) - 1)
    return 0.5 * float(v[lo] + v[hi])


def robust_scale(resid: np.ndarray, weights=None) -> float:
    """Normalised median absolute residual, weighted by ``weights`` if given."""
    a = np.abs(np.asarray(resid, dtype=float))
    if weights is None:
        return MAD_CONSTANT * float(np.median(a))
    return MAD_CONSTANT * weighted_median(a, weights)


def fit_robust_vs(
    X,
    z,
    vs,
    psi: PsiSpec | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    fixed_scale: float | None = None,
) -> TrendFit:
    """Veracity-weighted M-estimate of the trend coefficients via IRLS.

    Observations with ``vs == 0`` (including undefined scores mapped to 0)
    drop out of the fit entirely. The scale is re-estimated every iteration
    as the VS-weighted median absolute residual unless ``fixed_scale`` is given.
    ``objective_trace`` records ``sum vs * rho(r / s)`` after each update.
    """
    psi = psi or PsiSpec()
    X, z, vs = _validate(X, z, vs)
    active = vs > 0
    beta = _wls_solve(X, z, vs)
    trace = []
    converged = psi.family == "squared"
    it = 0
    scale = float("nan")
    w = vs.copy()
    if not converged:
        for it in range(1, max_iter + 1):
            resid = z - X @ beta
            scale = fixed_scale if fixed_scale is not None else robust_scale(resid[active], vs[active])
            if not scale > 0:
                converged = True
                break
            u = resid / scale
            trace.append(float(np.sum(vs * psi.rho(u))))
            w = vs * psi.weight(u)
            new = _wls_solve(X, z, w)
            step = np.max(np.abs(new - beta))
            beta = new
            if step < tol:
                converged = True
                break
        resid = z - X @ beta
        if scale > 0:
            trace.append(float(np.sum(vs * psi.rho(resid / scale))))
    fitted = X @ beta
    resid = z - fitted
    fit = TrendFit(
        beta=beta, weights=w, psi=psi, fitted=fitted, residuals=resid,
        cov=sandwich_cov(X, resid, w), scale=scale, converged=converged,
        n_iter=it, objective_trace=trace,
    )
    if psi.family == "squared" or not scale > 0:
        loss = None
    else:
        loss = lambda y, u: psi.rho((y - u) / scale)  # noqa: E731
    fit.r2_vs = r2_vs(z, fitted, vs, loss)
    return fit


def _squared_loss(y, u):
    return (y - u) ** 2


def r2_vs(z, fitted, vs, loss: Callable | None = None) -> float:
    """``1 - sum V L(Z, fitted) / sum V L(Z, mean(Z))``.

    Returns NaN when the denominator vanishes (diagnostic unavailable).
    ``mean(Z)`` is the plain, unweighted mean.
    """
    loss = loss or _squared_loss
    z = np.asarray(z, dtype=float)
    vs = np.asarray(vs, dtype=float)
    den = float(np.sum(vs * loss(z, np.full_like(z, z.mean()))))
    if not den > 0:
        return float("nan")
    return 1.0 - float(np.sum(vs * loss(z, np.asarray(fitted, dtype=float)))) / den


def adjusted_r2(z, fitted, w, p: int) -> float:
    """Weighted coefficient of determination adjusted for ``p`` coefficients."""
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    n = int(np.count_nonzero(w > 0))
    if n - p <= 0:
        return float("nan")
    zbar = np.sum(w * z) / np.sum(w)
    sst = np.sum(w * (z - zbar) ** 2)
    if not sst > 0:
        return float("nan")
    sse = np.sum(w * (z - fitted) ** 2)
    return 1.0 - (sse / sst) * (n - 1) / (n - p)
