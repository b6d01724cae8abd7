import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import augmented_ok
from vkrige.errors import DataError, ParameterError, SingularSystemError
from vkrige.geo import Dataset, SpatialPoint, build_index, pairwise_distances
from vkrige.kriging import (
    HighVSLoocv,
    KrigingSystem,
    QContext,
    StationsInRegion,
    margin_of_error,
    ordinary_krige,
    pct_me_change,
    predict_surface,
    predict_vs,
    q_score,
    select_q,
    smooth_residuals_no_ref,
    smooth_residuals_with_ref,
)
from vkrige.trend import fit_weighted_ls
from vkrige.variogram import VariogramModel, semivariogram
from vkrige.veracity import VeracityConfig, veracity_with_reference

THETA = VariogramModel("matern", 0.0, 6.0, 0.5, 3.0)


def oracle_predict(sites, model, target, resid):
    G = semivariogram(pairwise_distances(sites), model)
    g = semivariogram(pairwise_distances(sites, np.atleast_2d(target))[:, 0], model)
    return augmented_ok(G, g, resid)


# smoothing ------------------------------------------------------------------------

def test_smoothing_examples():
    hoods = [np.array([0, 1, 2])] * 3
    r = np.array([10.0, -3.0, 0.0])
    assert np.array_equal(smooth_residuals_no_ref(r, [0.2, 0.5, 0.9], 0.0, hoods).values, r)
    out = smooth_residuals_no_ref(r, [1.0, 0.5, 0.9], 2.0, hoods).values
    assert out[0] == 10.0
    # residual 0 equals the neighbourhood median, so it is a fixed point
    assert out[2] == 0.0
    sm = smooth_residuals_with_ref([10.0], [0.25], 1.0, [np.array([3.0, 1.0, 2.0])],
                                   [np.array([[1.0], [1.0], [1.0]])], np.array([2.0]))
    assert sm.values[0] == pytest.approx(2.5, abs=1e-15)
    with pytest.raises(ParameterError):
        smooth_residuals_no_ref(r, [1, 1, 1], -0.5, hoods)


def test_undefined_scores_pull_to_anchor():
    hoods = [np.array([0, 1, 2])] * 3
    r = np.array([10.0, 1.0, 2.0])
    sm = smooth_residuals_no_ref(r, [np.nan, 1.0, 1.0], 1.0, hoods)
    assert sm.values[0] == 2.0 and sm.undefined[0]
    assert smooth_residuals_no_ref(r, [np.nan, 1.0, 1.0], 0.0, hoods).values[0] == 10.0


def test_with_ref_at_nu_zero_constant_surface_reduces_to_no_ref(rng):
    centres = np.array([[0, 0], [3, 0], [0, 3], [3, 3]], dtype=float)
    xy = np.vstack([c + rng.uniform(-0.1, 0.1, (9, 2)) for c in centres])
    z = rng.normal(20, 3, len(xy))
    data = Dataset.from_arrays(xy, z)
    rep = veracity_with_reference(data, lambda s, e: np.full(len(s), 4.0), VeracityConfig(delta=0.5, nu=0.0))
    X = np.ones((len(z), 1))
    fit = fit_weighted_ls(X, z)
    resid = z - fit.fitted
    a = smooth_residuals_with_ref(resid, rep.vs, 0.8, rep.neighbor_benchmarks, [X[h] for h in rep.neighborhoods], fit.beta)
    b = smooth_residuals_no_ref(resid, rep.vs, 0.8, rep.neighborhoods)
    assert np.allclose(a.values, b.values, atol=1e-12)


# ordinary kriging -----------------------------------------------------------------

def test_single_site():
    pred, var, lam = ordinary_krige(np.array([2.0]), np.array([[0.0, 0.0]]), SpatialPoint(3, 4), THETA)
    assert pred == 2.0 and lam.tolist() == [1.0]
    assert var == pytest.approx(2 * semivariogram(5.0, THETA))


def test_symmetric_pair():
    for m in (THETA, VariogramModel("spherical", 0.2, 1, 3), VariogramModel("gaussian", 0, 2, 1)):
        _, _, lam = ordinary_krige([1.0, 5.0], [[-1, 0], [1, 0]], (0, 0.3), m)
        assert np.allclose(lam, [0.5, 0.5], atol=1e-12)


def test_duplicate_sites_rejected():
    with pytest.raises(SingularSystemError, match="duplicate"):
        KrigingSystem(np.array([[0, 0], [1, 1], [0, 0]]), THETA)


def test_twelve_sites_against_augmented_system(rng):
    sites = rng.uniform(0, 2, (12, 2))
    resid = rng.normal(size=12)
    sys_ = KrigingSystem(sites, THETA)
    for t in rng.uniform(0, 2, (5, 2)):
        pred, var, lam = sys_.predict(t, resid)
        p0, v0, l0 = oracle_predict(sites, THETA, t, resid)
        assert abs(pred[0] - p0) <= 1e-8 * max(abs(p0), 1)
        assert abs(var[0] - v0) <= 1e-8 * max(abs(v0), 1e-8)
        assert np.allclose(lam[:, 0], l0, rtol=1e-8, atol=1e-10)


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 31))
    sites = rng.uniform(0, 3, (n, 2))
    model = VariogramModel(
        str(rng.choice(["matern", "exponential", "spherical", "gaussian"])),
        float(rng.uniform(0, 1)), float(rng.uniform(0.5, 8)), float(rng.uniform(0.3, 2)),
        float(rng.choice([0.5, 1.0, 1.5, 2.5])),
    )
    if model.family == "gaussian":
        model = VariogramModel("gaussian", max(model.nugget, 0.05), model.partial_sill, model.range)
    return rng, sites, model, rng.normal(size=n)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weights_sum_to_one_and_variance_nonnegative(seed):
    rng, sites, model, resid = random_instance(seed)
    sys_ = KrigingSystem(sites, model)
    targets = rng.uniform(-0.5, 3.5, (4, 2))
    pred, var, lam = sys_.predict(targets, resid)
    assert np.all(np.abs(lam.sum(axis=0) - 1) < 1e-10)
    assert np.all(var >= 0)
    # variance does not depend on the residual values
    _, var2, _ = sys_.predict(targets, rng.permutation(resid))
    assert np.array_equal(var, var2)
    # adding c to the residuals adds c to the prediction
    pred_c, _, _ = sys_.predict(targets, resid + 7.5)
    assert np.allclose(pred_c, pred + 7.5, atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_exact_interpolation_without_nugget(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 30))
    sites = rng.uniform(0, 2, (n, 2))
    m = VariogramModel("matern", 0.0, float(rng.uniform(1, 8)), float(rng.uniform(0.2, 1)), 1.5)
    resid = rng.normal(size=n)
    pred, var, _ = KrigingSystem(sites, m).predict(sites, resid)
    assert np.max(np.abs(pred - resid)) < 1e-8
    assert np.max(var) < 1e-8


def test_near_singular_system_uses_jitter():
    sites = np.array([[0, 0], [1e-9, 0], [1, 0], [0, 1]])
    sys_ = KrigingSystem(sites, VariogramModel("gaussian", 0.0, 1.0, 1.0))
    assert sys_.jitter > 0
    pred, var, lam = sys_.predict([[0.5, 0.5]], [1.0, 1.0, 2.0, 3.0])
    assert abs(lam.sum() - 1) < 1e-8 and np.isfinite(pred).all()


# predictor and margin of error ----------------------------------------------------

def test_margin_of_error_examples():
    assert margin_of_error(0.0, 1.0) == pytest.approx(1.96)
    assert margin_of_error(1.0, 4.0) == pytest.approx(5.88)
    assert margin_of_error(0.7, 0.0) == pytest.approx(1.96 * 0.7)


def test_pct_me_change_examples():
    assert pct_me_change(3.0, 3.0) == 0
    assert pct_me_change(0.5, 1.0) == -50
    assert pct_me_change(2.2, 1.0) == pytest.approx(120)
    with pytest.raises(ParameterError):
        pct_me_change(1.0, 0.0)


def _fitted_trend(rng, sites):
    X = np.column_stack([np.ones(len(sites)), sites])
    z = X @ [3.0, 1.0, -2.0] + rng.normal(size=len(sites))
    return X, z, fit_weighted_ls(X, z)


def test_predict_vs_zero_residuals_is_trend(rng):
    sites = rng.uniform(0, 2, (15, 2))
    X, z, fit = _fitted_trend(rng, sites)
    res = predict_vs((0.4, 0.9), [1, 0.4, 0.9], fit, np.zeros(15), sites, THETA)
    assert res.prediction == pytest.approx(fit.predict(np.array([[1, 0.4, 0.9]]))[0], abs=1e-12)


def test_predict_vs_at_site_is_exact(rng):
    sites = rng.uniform(0, 2, (15, 2))
    X, z, fit = _fitted_trend(rng, sites)
    resid = z - fit.fitted
    res = predict_vs(sites[3], X[3], fit, resid, sites, THETA)
    assert res.prediction == pytest.approx(fit.fitted[3] + resid[3], abs=1e-8)
    assert abs(res.variance) < 1e-8
    assert res.margin_of_error == pytest.approx(1.96 * res.trend_se, abs=1e-3)


def test_predict_surface_missing_covariates(rng):
    sites = rng.uniform(0, 2, (10, 2))
    X, z, fit = _fitted_trend(rng, sites)
    with pytest.raises(DataError):
        predict_surface([[0, 0]], [[1, np.nan, 0]], fit, z - fit.fitted, sites, THETA)


# q selection ----------------------------------------------------------------------

def _context(rng, noisy=True):
    sites = rng.uniform(0, 2, (40, 2))
    X = np.column_stack([np.ones(40), sites])
    z = X @ [10.0, 1.0, -1.0] + rng.normal(0, 1, 40)
    vs = np.ones(40)
    if noisy:
        bad = rng.choice(40, 6, replace=False)
        z[bad] += rng.normal(0, 25, 6)
        vs = rng.uniform(0.6, 1.0, 40)
        vs[bad] = rng.uniform(0.01, 0.2, 6)
    fit = fit_weighted_ls(X, z, vs)
    resid = z - fit.fitted
    hoods = build_index(sites, 0.4).all_neighborhoods()
    model = VariogramModel("exponential", 0.5, 2.0, 0.6)
    return QContext(sites, z, X, fit, vs, lambda q: smooth_residuals_no_ref(resid, vs, q, hoods), lambda sm: model)


def test_select_q_single_and_ties(rng):
    assert select_q([0.7]) == 0.7
    ctx = _context(rng, noisy=False)
    assert select_q([2.0, 0.4, 1.0], ctx, HighVSLoocv()) == 0.4


def test_select_q_is_argmin_of_exhaustive_scan(rng):
    ctx = _context(rng)
    stations = rng.uniform(0, 2, (8, 2))
    Xs = np.column_stack([np.ones(8), stations])
    mode = StationsInRegion(stations, Xs, Xs @ [10.0, 1.0, -1.0])
    cands = [0.05, 0.2, 0.6, 1.0, 2.0, 3.0]
    best = select_q(cands, ctx, mode)
    scores = {q: q_score(q, ctx, mode) for q in cands}
    assert all(scores[best] <= s for s in scores.values())
    best_loo = select_q(cands, ctx, HighVSLoocv(0.8))
    loo = {q: q_score(q, ctx, HighVSLoocv(0.8)) for q in cands}
    assert all(loo[best_loo] <= s for s in loo.values())


def test_select_q_empty_test_set(rng):
    ctx = _context(rng)
    with pytest.raises(ParameterError, match="lower the threshold"):
        select_q([0.5, 1.0], ctx, HighVSLoocv(1.01))
    with pytest.raises(ParameterError):
        select_q([0.5, 1.0], ctx, StationsInRegion(np.empty((0, 2)), np.empty((0, 3)), np.empty(0)))
    with pytest.raises(ParameterError):
        select_q([])
