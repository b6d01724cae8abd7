"""
Command-line front end: ``vkrige {score,krige,simulate,validate}``.

Every option can also come from a flat ``key=value`` config file
(``--config``); keys are the long flag names with dashes replaced by
underscores, and flags given on the command line win. Exit codes:
0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import replace

import numpy as np

from .errors import (
    ConvergenceError,
    DataError,
    DomainError,
    ParameterError,
    SingularSystemError,
    VKrigeError,
)
from .geo import Dataset, Observation, SpatialPoint, pairwise_distances, quantile
from .kriging import DEFAULT_Q_GRID, HighVSLoocv
from .pipeline import PipelineConfig, adaptive_nu_for, fit_standard, fit_vs, reference_surface, score, stations_in_region
from .simulate import METHODS, NOISE_PRESETS, SimConfig, run_experiment
from .trend import PsiSpec, TrendSpec
from .variogram import FAMILIES, VariogramModel
from .veracity import VeracityConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
INPUT_COLUMNS = ("id", "x", "y", "elev", "value")
SCORED_COLUMNS = INPUT_COLUMNS + ("vs", "benchmark", "n_i", "undefined")
SURFACE_COLUMNS = ("x", "y", "elev", "pred", "krig_var", "me")
REPORT_COLUMNS = ("id", "x", "y", "elev", "target", "pred_vs", "me_vs", "pred_std", "me_std")

DEFAULTS = {
    "alpha": "3",
    "delta": "0.08",
    "nu": "auto",
    "q_grid": ",".join(str(q) for q in DEFAULT_Q_GRID),
    "bins": "15",
    "max_lag": "",
    "family": "matern",
    "fix_kappa": "0.5",
    "trend": "auto",
    "psi": "huber",
    "grid": "20x20",
    "seed": "0",
    "threads": "",
    "vs_threshold": "0.8",
    # simulate
    "n": "100",
    "m": "0",
    "noise": "b",
    "B": "50",
    "methods": "",
    "lambda_n": "",
    "lambda_m": "",
    "q": "1",
    "sim_delta": "0.5",
    "sim_nu": "0.5",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


# --------------------------------------------------------------------------
# config and IO
# --------------------------------------------------------------------------

def read_config(path) -> dict:
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS and key not in ("ref", "out", "holdout", "config"):
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def resolve(args) -> dict:
    """Defaults, then config file, then explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        opts.update(read_config(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config"):
            opts[key] = value
    return opts


def _num(opts, key, kind=float):
    raw = str(opts.get(key, "")).strip()
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def read_points(path) -> Dataset:
    """Load a CSV with header columns id,x,y,elev,value (elev may be blank)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in INPUT_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}:1: header lacks columns {missing}")
        col = {c: header.index(c) for c in INPUT_COLUMNS}
        obs = []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                x = float(row[col["x"]])
                y = float(row[col["y"]])
                value = float(row[col["value"]])
                e = row[col["elev"]].strip()
                elev = float(e) if e else None
                obs.append(Observation(row[col["id"]].strip(), SpatialPoint(x, y), value, elev))
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not obs:
        raise DataError(f"{path}: no observations")
    return Dataset(tuple(obs))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def write_manifest(path, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v if isinstance(v, str) else fmt(v)}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                out[k] = v
    return out


def model_from_manifest(items: dict) -> VariogramModel:
    return VariogramModel(
        items["family"], float(items["nugget"]), float(items["partial_sill"]),
        float(items["range"]), float(items["smoothness"]),
    )


# --------------------------------------------------------------------------
# building configs
# --------------------------------------------------------------------------

def _trend_spec(opts, *datasets) -> TrendSpec:
    text = str(opts["trend"]).strip()
    if text == "auto":
        has_elev = all(np.all(np.isfinite(d.elevation)) for d in datasets if d is not None)
        return TrendSpec() if has_elev else TrendSpec(("intercept", "x", "y"))
    return TrendSpec.parse(text)


def _q_grid(opts) -> list[float]:
    raw = str(opts["q_grid"]).replace(";", ",")
    try:
        qs = [float(t) for t in raw.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"q_grid: cannot parse {raw!r}") from None
    if not qs:
        raise UsageError("q_grid is empty")
    return qs


def pipeline_config(opts, spec: TrendSpec, nu=0.5) -> PipelineConfig:
    family = str(opts["family"])
    if family not in FAMILIES:
        raise UsageError(f"family must be one of {FAMILIES}")
    kappa_raw = str(opts["fix_kappa"]).strip()
    fix = kappa_raw.lower() not in ("free", "none", "")
    smooth = float(kappa_raw) if fix else 0.5
    max_lag = str(opts["max_lag"]).strip()
    return PipelineConfig(
        spec=spec,
        family=family,
        smoothness=smooth,
        fix_kappa=fix,
        bins=_num(opts, "bins", int),
        max_lag=float(max_lag) if max_lag else None,
        psi=PsiSpec(str(opts["psi"])),
        veracity=VeracityConfig(alpha=_num(opts, "alpha"), delta=_num(opts, "delta"), nu=nu),
        q=_q_grid(opts),
    )


def _nu(opts, ref_fit):
    raw = str(opts["nu"]).strip().lower()
    if raw == "auto":
        return adaptive_nu_for(ref_fit) if ref_fit is not None else 0.5
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"nu must be 'auto' or a number, got {raw!r}") from None


def _with_reference(opts, data):
    """Reference fit (or None) and the matching pipeline config."""
    ref_data = read_points(opts["ref"]) if opts.get("ref") else None
    spec = _trend_spec(opts, data, ref_data)
    base = pipeline_config(opts, spec)
    ref_fit = reference_surface(ref_data, replace(base, q=1.0)) if ref_data is not None else None
    cfg = replace(base, veracity=replace(base.veracity, nu=_nu(opts, ref_fit)))
    return ref_data, ref_fit, cfg


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

def idw_elevation(targets, sources_xy, sources_elev, power: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted elevation at ``targets``."""
    if sources_xy.shape[0] == 0:
        raise DataError("no elevations available to interpolate grid covariates")
    d = pairwise_distances(targets, sources_xy)
    out = np.empty(d.shape[0])
    for i, row in enumerate(d):
        hit = row == 0
        if hit.any():
            out[i] = sources_elev[hit][0]
        else:
            w = row ** -power
            out[i] = w @ sources_elev / w.sum()
    return out


def build_grid(opts, datasets, needs_elev: bool):
    """Grid coordinates, elevations and whether elevations were interpolated."""
    spec = str(opts["grid"]).strip()
    if "x" in spec.lower() and not os.path.exists(spec):
        try:
            nx, ny = (int(t) for t in spec.lower().split("x"))
        except ValueError:
            raise UsageError(f"grid must be NxM or a CSV path, got {spec!r}") from None
        if nx < 1 or ny < 1:
            raise UsageError("grid dimensions must be positive")
        bb = datasets[0].bbox
        gx = np.linspace(bb.xmin, bb.xmax, nx)
        gy = np.linspace(bb.ymin, bb.ymax, ny)
        X, Y = np.meshgrid(gx, gy, indexing="xy")
        xy = np.column_stack([X.ravel(), Y.ravel()])
        elev = np.full(xy.shape[0], np.nan)
        interpolated = False
        if needs_elev:
            src = [d for d in datasets if d is not None]
            sxy = np.vstack([d.xy for d in src])
            se = np.concatenate([d.elevation for d in src])
            ok = np.isfinite(se)
            elev = idw_elevation(xy, sxy[ok], se[ok])
            interpolated = True
        return xy, elev, interpolated
    xy, elev = _read_grid_csv(spec)
    if needs_elev and not np.all(np.isfinite(elev)):
        bad = np.where(~np.isfinite(elev))[0]
        cells = ", ".join(f"({xy[i, 0]:g}, {xy[i, 1]:g})" for i in bad[:10])
        raise DataError(f"grid lacks elevation at {len(bad)} cells: {cells}")
    return xy, elev, False


def _read_grid_csv(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read grid {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if "x" not in header or "y" not in header:
            raise DataError(f"{path}:1: grid header needs x and y")
        ie = header.index("elev") if "elev" in header else None
        pts, elev = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                pts.append((float(row[header.index("x")]), float(row[header.index("y")])))
                e = row[ie].strip() if ie is not None else ""
                elev.append(float(e) if e else np.nan)
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not pts:
        raise DataError(f"{path}: empty grid")
    return np.array(pts, dtype=float), np.array(elev, dtype=float)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_score(opts) -> int:
    data = read_points(opts["input"])
    _, ref_fit, cfg = _with_reference(opts, data)
    rep = score(data, cfg, ref_fit)
    rows = []
    for i, o in enumerate(data.observations):
        defined = bool(rep.defined[i])
        rows.append([
            str(o.id), o.loc.x, o.loc.y, o.elevation, o.value,
            rep.vs[i] if defined else None, rep.benchmark[i] if defined else None,
            int(rep.n_neighbors[i]), not defined,
        ])
    out = opts.get("out") or "scored.csv"
    write_csv(out, SCORED_COLUMNS, rows)
    vs = rep.vs[rep.defined]
    print(f"scored {len(data)} observations, {int(vs.size)} defined, {len(data) - int(vs.size)} undefined")
    if vs.size:
        dec = [quantile(vs, p / 10) for p in range(11)]
        print("vs deciles: " + " ".join(f"{d:.4f}" for d in dec))
    return EXIT_OK


def _fit_vs_for(opts, data, ref_data, ref_fit, cfg):
    qs = cfg.q
    q_test = None
    if len(qs) > 1:
        if ref_data is not None:
            st = stations_in_region(ref_data, data, cfg.spec)
            if len(st.values) > 0:
                q_test = st
        if q_test is None:
            q_test = HighVSLoocv(_num(opts, "vs_threshold"))
    return fit_vs(data, cfg, ref_fit, q_test=q_test)


def _manifest(fit, extra: dict) -> dict:
    m = fit.model
    items = {
        "method": fit.method,
        "q": fit.q,
        "family": m.family,
        "nugget": m.nugget,
        "partial_sill": m.partial_sill,
        "range": m.range,
        "smoothness": m.smoothness,
        "kriging_jitter": fit.system.jitter,
        "r2_vs": fit.trend.r2_vs,
        "trend_terms": ",".join(fit.spec.terms),
    }
    for term, b in zip(fit.spec.terms, fit.trend.beta):
        items[f"beta_{term}"] = b
    items.update(extra)
    return items


def cmd_krige(opts) -> int:
    data = read_points(opts["input"])
    ref_data, ref_fit, cfg = _with_reference(opts, data)
    fit = _fit_vs_for(opts, data, ref_data, ref_fit, cfg)
    xy, elev, interpolated = build_grid(opts, [data, ref_data], cfg.spec.needs_elevation)
    out = fit.predict(xy, elev)
    path = opts.get("out") or "surface.csv"
    rows = zip(xy[:, 0], xy[:, 1], elev, out["prediction"], out["variance"], out["me"])
    write_csv(path, SURFACE_COLUMNS, rows)
    write_manifest(path + ".manifest", _manifest(fit, {
        "n_obs": len(data),
        "reference": "true" if ref_fit is not None else "false",
        "elevation_interpolated": "true" if interpolated else "false",
        "grid_points": xy.shape[0],
    }))
    print(f"kriged {xy.shape[0]} grid points with q={fmt(fit.q)}; wrote {path}")
    return EXIT_OK


def cmd_validate(opts) -> int:
    data = read_points(opts["input"])
    if not opts.get("ref"):
        raise UsageError("validate needs --ref")
    ref_all = read_points(opts["ref"])
    raw = str(opts.get("holdout") or "")
    if raw.startswith("@"):
        with open(raw[1:]) as fh:
            raw = ",".join(line.strip() for line in fh)
    hold = [t.strip() for t in raw.split(",") if t.strip()]
    if not hold:
        raise UsageError("empty holdout set")
    ids = [str(i) for i in ref_all.ids]
    unknown = [h for h in hold if h not in ids]
    if unknown:
        raise DataError(f"holdout ids not in reference data: {unknown}")
    hold_idx = [ids.index(h) for h in hold]
    keep = [i for i in range(len(ref_all)) if i not in set(hold_idx)]
    ref_data = ref_all.subset(keep)
    targets = ref_all.subset(hold_idx)
    if len(ref_data) < 3:
        raise DataError("fewer than 3 reference stations remain after removing holdouts")

    spec = _trend_spec(opts, data, ref_all)
    base = pipeline_config(opts, spec)
    ref_fit = reference_surface(ref_data, replace(base, q=1.0))
    cfg = replace(base, veracity=replace(base.veracity, nu=_nu(opts, ref_fit)))
    vs_fit = _fit_vs_for(opts, data, ref_data, ref_fit, cfg)
    std_fit = fit_standard(data, cfg)
    if spec.needs_elevation and not np.all(np.isfinite(targets.elevation)):
        raise DataError("holdout stations need elevations for the trend")
    pv = vs_fit.predict(targets.xy, targets.elevation)
    ps = std_fit.predict(targets.xy, targets.elevation)
    rows = []
    for i, o in enumerate(targets.observations):
        rows.append([str(o.id), o.loc.x, o.loc.y, o.elevation, o.value,
                     pv["prediction"][i], pv["me"][i], ps["prediction"][i], ps["me"][i]])
    path = opts.get("out") or "report.csv"
    write_csv(path, REPORT_COLUMNS, rows)
    truth = targets.values
    agg = {
        "rmspe_vs": float(np.sqrt(np.mean((pv["prediction"] - truth) ** 2))),
        "rmspe_std": float(np.sqrt(np.mean((ps["prediction"] - truth) ** 2))),
        "mean_me_vs": float(np.mean(pv["me"])),
        "mean_me_std": float(np.mean(ps["me"])),
    }
    agg["pct_me_change"] = 100.0 * (agg["mean_me_vs"] - agg["mean_me_std"]) / agg["mean_me_std"]
    write_manifest(path + ".manifest", _manifest(vs_fit, {"n_holdout": len(targets), **agg}))
    for k, v in agg.items():
        print(f"{k}={fmt(v)}")
    return EXIT_OK


def cmd_simulate(opts) -> int:
    noise = str(opts["noise"])
    if noise not in NOISE_PRESETS:
        raise UsageError(f"noise must be one of {sorted(NOISE_PRESETS)}")
    seed = _num(opts, "seed", int)
    lam = str(opts["lambda_n"]).strip()
    big = str(opts["lambda_m"]).strip()
    m = _num(opts, "m", int)
    try:
        cfg = SimConfig(
            n=_num(opts, "n", int),
            m=m,
            lambda_n=float(lam) if lam else None,
            Lambda_m=float(big) if big else None,
            noise=NOISE_PRESETS[noise],
            seed=seed,
            alpha=_num(opts, "alpha"),
            delta=_num(opts, "sim_delta"),
            q=_num(opts, "q"),
            nu=None if str(opts["sim_nu"]).lower() == "auto" else _num(opts, "sim_nu"),
        )
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    methods = [t.strip() for t in str(opts["methods"]).split(",") if t.strip()]
    if not methods:
        methods = ["vs", "standard"] + (["ref_only"] if m > 0 else [])
    bad = [t for t in methods if t not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}")
    threads_raw = str(opts["threads"]).strip()
    threads = int(threads_raw) if threads_raw else None
    summary = run_experiment(cfg, _num(opts, "B", int), methods, threads=threads)
    path = opts.get("out") or "tables.csv"
    summary.write_csv(path)
    print(f"{summary.B} replicates kept, {summary.failed} failed; wrote {path}")
    for rep, msg in summary.failures[:5]:
        print(f"replicate {rep} failed: {msg}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--alpha", help="baseline deviation in data units (default 3)")
    p.add_argument("--delta", help="neighbourhood half-width (default 0.08)")
    p.add_argument("--nu", help="benchmark mixing: 'auto' or a value in [0, 1]")
    p.add_argument("--q-grid", dest="q_grid", help="comma-separated smoothing exponents")
    p.add_argument("--bins", help="number of lag bins (default 15)")
    p.add_argument("--max-lag", dest="max_lag", help="largest lag (default half the max distance)")
    p.add_argument("--family", help=f"variogram family: {', '.join(FAMILIES)}")
    p.add_argument("--fix-kappa", dest="fix_kappa", help="Matern smoothness to hold fixed, or 'free'")
    p.add_argument("--trend", help="trend terms, e.g. intercept,x,y,elevation (default auto)")
    p.add_argument("--psi", help="robust loss: huber, bisquare, lqq or squared")
    p.add_argument("--grid", help="NxM over the data bounding box, or a grid CSV (x,y[,elev])")
    p.add_argument("--seed", help="unsigned 64-bit seed")
    p.add_argument("--threads", help="worker processes (default $VKRIGE_THREADS or 1)")
    p.add_argument("--out", metavar="PATH", help="output file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vkrige", description="Veracity-score robust kriging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("score", help="compute veracity scores for observations")
    p.add_argument("input", help="observation CSV (id,x,y,elev,value)")
    p.add_argument("--ref", help="reference CSV with the same schema")
    _common(p)

    p = sub.add_parser("krige", help="predict a surface from scored or raw observations")
    p.add_argument("input", help="observation or scored CSV")
    p.add_argument("--ref", help="reference CSV")
    _common(p)

    p = sub.add_parser("simulate", help="run a seeded simulation experiment")
    _common(p)
    p.add_argument("--n", help="noisy sample size (default 100)")
    p.add_argument("--m", help="reference sample size (default 0)")
    p.add_argument("--noise", help="noise preset a, b, c or clean (default b)")
    p.add_argument("--B", help="number of replicates (default 50)")
    p.add_argument("--methods", help="comma list from vs,standard,ref_only")
    p.add_argument("--lambda-n", dest="lambda_n", help="side of the noisy-data region")
    p.add_argument("--lambda-m", dest="lambda_m", help="side of the reference region")
    p.add_argument("--q", help="smoothing exponent (default 1)")
    p.add_argument("--sim-delta", dest="sim_delta", help="VS neighbourhood half-width (default 0.5)")
    p.add_argument("--sim-nu", dest="sim_nu", help="mixing weight or 'auto' (default 0.5)")

    p = sub.add_parser("validate", help="hold out reference stations and compare pipelines")
    p.add_argument("input", help="observation CSV")
    p.add_argument("--ref", help="reference CSV")
    p.add_argument("--holdout", help="comma-separated reference ids, or @file with one per line")
    _common(p)
    return parser


COMMANDS = {"score": cmd_score, "krige": cmd_krige, "simulate": cmd_simulate, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"vkrige: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"vkrige: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"vkrige: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularSystemError, ConvergenceError, DomainError, np.linalg.LinAlgError) as exc:
        print(f"vkrige: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VKrigeError as exc:
        print(f"vkrige: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"vkrige: {exc}", file=sys.stderr)
        return EXIT_DATA
