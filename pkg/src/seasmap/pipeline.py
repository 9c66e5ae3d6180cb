"""File-level pipeline steps behind the command-line interface.

Each step reads plain CSV/text inputs and writes plain CSV/text outputs so
that every intermediate result can be inspected and diffed. Numbers are
written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import seasonal, selection, stmodel
from .errors import DomainError, ValidationError
from .ingest import (
    DEFAULT_LAGS,
    LOG_OUTLIER_THRESHOLD,
    PROPORTION_OFFSET,
    FacilitySeries,
    Observation,
    build_design,
    filter_outliers,
    load_covariates,
    load_facilities,
    log_observations,
    reduce_to_series,
)

log = logging.getLogger(__name__)

SERIES_FILE = "series.csv"
OBS_FILE = "observations.csv"
DESIGN_FILE = "design.csv"
STATS_FILE = "standardization.csv"
DROPS_FILE = "drops.txt"
SUMMARY_FILE = "prep_summary.txt"
REPORT_FILE = "selection.txt"
MODEL_FILE = "model.smm"
FEATURES_FILE = "features.csv"
MPI_FILE = "mpi.csv"
PROPORTIONS_FILE = "proportions.csv"

FEATURES_HEADER = [
    "lon", "lat", "entropy", "index", "category", "modality", "modality_prob", "season_rank",
    "start_month", "start_dev_months", "end_month", "end_dev_months", "peak_month",
    "peak_dev_months", "length_months", "major",
]
MPI_HEADER = ["lon", "lat", "month", "mpi_median", "mpi_lo95", "mpi_hi95"]
PROPORTIONS_HEADER = ["lon", "lat", "month", "p_median", "p_lo95", "p_hi95"]


def num(v):
    """Exact, locale-free text for a float."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path, expected=None):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if expected is not None and header[: len(expected)] != list(expected):
        raise ValidationError(f"{path}:1: expected header starting {','.join(expected)!r}")
    body = []
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        body.append((line, dict(zip(header, (c.strip() for c in row)))))
    return header, body


def _float(path, line, value, what):
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"{path}:{line}: {what} {value!r} is not a number") from None


def worker_count(configured=None):
    env = os.environ.get("SEASMAP_THREADS")
    value = env if env else configured
    if value in (None, ""):
        return 1
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise ValidationError(f"worker count must be an integer, got {value!r}") from None
    if n < 1:
        raise ValidationError("worker count must be at least 1")
    return n


# ---------------------------------------------------------------------------
# prep
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    """Prepared training inputs as read back from a prep directory."""

    series: list
    observations: dict
    columns: list
    design: dict
    stats: dict
    lags: dict

    def builder(self, series, columns):
        """ModelData for a facility subset with an intercept plus ``columns``."""
        idx = [self.columns.index(c) for c in columns]
        locations = np.array([s.location for s in series], dtype=float)
        obs = []
        node_design = np.ones((12 * len(series), 1 + len(idx)))
        n = len(series)
        for j, s in enumerate(series):
            obs.extend(Observation(j, m, v) for m, v in self.observations.get(s.facility_id, []))
            rows = self.design[s.facility_id]
            for m in range(12):
                node_design[m * n + j, 1:] = rows[m, idx]
        return stmodel.ModelData.from_nodes(
            locations, obs, node_design, [selection.INTERCEPT] + list(columns)
        )


def run_prep(facilities, covariates, outdir, lags=DEFAULT_LAGS, offset=PROPORTION_OFFSET,
             threshold=LOG_OUTLIER_THRESHOLD):
    """Reduce facility records, filter outliers and tabulate standardised design inputs."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_facilities(facilities)
    series, drops = reduce_to_series(records)
    stack = load_covariates(covariates, lags)

    inside = stack.contains([s.location for s in series]) if series else np.zeros(0, bool)
    kept = []
    for s, ok in zip(series, inside):
        if ok:
            kept.append(s)
        else:
            drops.add(s.facility_id, "outside_covariate_grid")
    series = kept
    if not series:
        raise ValidationError("no facility survived preprocessing")

    obs, n_out = filter_outliers(log_observations(series, offset), threshold)
    columns = stack.column_names()
    design = build_design(stack, [s.location for s in series], columns)
    n = len(series)

    _write_csv(
        out / SERIES_FILE,
        ["facility_id", "lon", "lat", "zero_case"]
        + [f"m{k}" for k in range(1, 13)]
        + [f"p{k}" for k in range(1, 13)],
        [
            [s.facility_id, num(s.lon), num(s.lat), int(s.zero_case)]
            + [num(v) for v in s.median_counts]
            + [num(v) for v in s.proportions]
            for s in series
        ],
    )
    _write_csv(
        out / OBS_FILE,
        ["facility_id", "month", "log_p"],
        [[series[o.location].facility_id, o.month, num(o.value)] for o in obs],
    )
    _write_csv(
        out / DESIGN_FILE,
        ["facility_id", "month"] + columns,
        [
            [s.facility_id, m + 1] + [num(v) for v in design[m * n + j, 1:]]
            for j, s in enumerate(series)
            for m in range(12)
        ],
    )
    _write_csv(
        out / STATS_FILE,
        ["covariate", "mean", "sd", "lags"],
        [
            [name, num(stack.stats[name][0]), num(stack.stats[name][1]),
             "|".join(str(k) for k in sorted(stack.lags[name]))]
            for name in stack.names
        ],
    )
    (out / DROPS_FILE).write_text("".join(line + "\n" for line in drops.lines()), encoding="utf-8")
    summary = {
        "facilities_kept": len(series),
        "facilities_dropped": len(drops),
        "observations": len(obs),
        "outliers_removed": n_out,
        "offset": num(offset),
        "log_outlier_threshold": num(threshold),
    }
    (out / SUMMARY_FILE).write_text(
        "".join(f"{k} = {v}\n" for k, v in summary.items()), encoding="utf-8"
    )
    return summary


def read_prep(prepdir):
    d = Path(prepdir)
    _, rows = _read_csv(d / SERIES_FILE, ["facility_id", "lon", "lat", "zero_case"])
    series = []
    for line, r in rows:
        counts = np.array([_float(d / SERIES_FILE, line, r[f"m{k}"], "count") for k in range(1, 13)])
        props = np.array([_float(d / SERIES_FILE, line, r[f"p{k}"], "proportion") for k in range(1, 13)])
        series.append(
            FacilitySeries(
                r["facility_id"],
                _float(d / SERIES_FILE, line, r["lon"], "lon"),
                _float(d / SERIES_FILE, line, r["lat"], "lat"),
                counts,
                props,
                r["zero_case"] == "1",
            )
        )
    ids = {s.facility_id for s in series}
    _, rows = _read_csv(d / OBS_FILE, ["facility_id", "month", "log_p"])
    observations = {}
    for line, r in rows:
        if r["facility_id"] not in ids:
            raise ValidationError(f"{d / OBS_FILE}:{line}: unknown facility {r['facility_id']!r}")
        observations.setdefault(r["facility_id"], []).append(
            (int(r["month"]), _float(d / OBS_FILE, line, r["log_p"], "log_p"))
        )
    header, rows = _read_csv(d / DESIGN_FILE, ["facility_id", "month"])
    columns = header[2:]
    design = {fid: np.full((12, len(columns)), np.nan) for fid in ids}
    for line, r in rows:
        fid = r["facility_id"]
        if fid not in design:
            raise ValidationError(f"{d / DESIGN_FILE}:{line}: unknown facility {fid!r}")
        m = int(r["month"])
        design[fid][m - 1] = [_float(d / DESIGN_FILE, line, r[c], c) for c in columns]
    for fid, rows_ in design.items():
        if np.isnan(rows_).any():
            raise ValidationError(f"{d / DESIGN_FILE}: incomplete design rows for {fid!r}")
    _, rows = _read_csv(d / STATS_FILE, ["covariate", "mean", "sd", "lags"])
    stats, lags = {}, {}
    for line, r in rows:
        stats[r["covariate"]] = (
            _float(d / STATS_FILE, line, r["mean"], "mean"),
            _float(d / STATS_FILE, line, r["sd"], "sd"),
        )
        lags[r["covariate"]] = tuple(int(k) for k in r["lags"].split("|") if k)
    return Prepared(series, observations, columns, design, stats, lags)


# ---------------------------------------------------------------------------
# select / fit
# ---------------------------------------------------------------------------

def run_select(prepdir, outpath, settings, seed=0, test_fraction=selection.TEST_FRACTION,
               vif_threshold=selection.VIF_THRESHOLD, single_pass=False, candidates=None):
    prep = read_prep(prepdir)
    cands = list(candidates) if candidates else list(prep.columns)
    unknown = [c for c in cands if c not in prep.columns]
    if unknown:
        raise ValidationError(
            f"unknown candidate covariates {unknown}; available: {', '.join(prep.columns)}"
        )
    report = selection.select_covariates(
        prep.series, prep.builder, cands, settings, seed, test_fraction, vif_threshold, single_pass
    )
    Path(outpath).parent.mkdir(parents=True, exist_ok=True)
    Path(outpath).write_text(report.text(), encoding="utf-8")
    return report


def read_final_covariates(report_path):
    for line in Path(report_path).read_text(encoding="utf-8").splitlines():
        if line.startswith("FINAL"):
            body = line[len("FINAL"):].strip().split(" dic=")[0].strip()
            return [c for c in body.split(",") if c]
    raise ValidationError(f"{report_path}: no FINAL line")


def run_fit(prepdir, covariates, outpath, settings, seed=0):
    """Fit on every prepared facility and write the model archive."""
    prep = read_prep(prepdir)
    unknown = [c for c in covariates if c not in prep.columns]
    if unknown:
        raise ValidationError(
            f"unknown covariates {unknown}; available: {', '.join(prep.columns)}"
        )
    data = prep.builder(prep.series, list(covariates))
    model = stmodel.fit(
        data,
        beta_prior_var=settings.beta_prior_var,
        stationary=settings.stationary,
        max_iter=settings.max_iter,
        dic_seed=seed,
        n_dic_draws=settings.n_dic_draws,
    )
    model.meta.update(
        covariates=list(covariates),
        standardization={k: list(prep.stats[k]) for k in sorted(prep.stats)},
        lags={k: list(prep.lags[k]) for k in sorted(prep.lags)},
        facility_ids=[s.facility_id for s in prep.series],
    )
    Path(outpath).parent.mkdir(parents=True, exist_ok=True)
    stmodel.save_model(model, outpath)
    return model


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def read_points(path, value=None):
    cols = ["lon", "lat"] + ([value] if value else [])
    _, rows = _read_csv(path, cols)
    pts = np.array([[_float(path, ln, r["lon"], "lon"), _float(path, ln, r["lat"], "lat")]
                    for ln, r in rows]).reshape(-1, 2)
    if value is None:
        return pts
    vals = np.array([_float(path, ln, r[value], value) for ln, r in rows])
    if np.any(vals < 0):
        raise ValidationError(f"{path}: {value} must be non-negative")
    return pts, vals


@dataclass
class TargetResult:
    location: tuple
    summary: seasonal.UncertaintySummary
    entropy: float
    curves: np.ndarray
    api: float


def _target_chunk(curves_fn, api, api_max, error_threshold, chunk):
    """Per-sample features and summaries for a block of targets."""
    curves = curves_fn(chunk)  # (S, len(chunk), 12)
    S, T, _ = curves.shape
    flat = curves.transpose(1, 0, 2).reshape(T * S, 12)
    feats = seasonal.derive_features_batch(flat, error_threshold)
    out = []
    for t in range(T):
        fs = feats[t * S : (t + 1) * S]
        index = [f.entropy * api[chunk[t]] / api_max for f in fs]
        summ = seasonal.summarize_samples(fs, index)
        ent = float(np.median([f.entropy for f in fs]))
        out.append((summ, ent, curves[:, t, :]))
    return out


def run_features(model_path, covariates_path, targets_path, api_path, outdir, n_samples=100,
                 seed=0, threads=None, error_threshold=seasonal.ERROR_THRESHOLD, chunk_size=25):
    """Posterior seasonality features, MPI and proportion bands at target locations."""
    model = stmodel.load_model(model_path)
    meta = model.meta
    if "standardization" not in meta:
        raise ValidationError(f"{model_path}: archive lacks standardisation statistics")
    if n_samples < 1:
        raise ValidationError("sample count must be at least 1")
    lags = {k: tuple(v) for k, v in meta["lags"].items()}
    stack = load_covariates(covariates_path, sorted({x for v in lags.values() for x in v}))
    missing = [k for k in meta["standardization"] if k not in stack.grids]
    if missing:
        raise ValidationError(f"{covariates_path}: lacks covariates {missing} used by the model")
    stack = stack.with_stats({k: tuple(v) for k, v in meta["standardization"].items()})

    targets = read_points(targets_path)
    inside = stack.contains(targets)
    for k in np.flatnonzero(~inside):
        log.warning("target (%s, %s) outside the covariate grid; skipped", targets[k, 0], targets[k, 1])
    targets = targets[inside]
    if len(targets) == 0:
        raise DomainError("no target lies inside the covariate grid")

    api_pts, api_vals = read_points(api_path, "api")
    if api_vals.size == 0:
        raise ValidationError(f"{api_path}: no rows")
    api_max = float(api_vals.max())
    if not api_max > 0:
        raise ValidationError(f"{api_path}: maximum api must be positive")
    api = api_vals[cKDTree(api_pts).query(targets)[1]]

    design = build_design(stack, targets, list(meta["covariates"]))
    draws = stmodel.sample_posterior(model, n_samples, seed)

    def curves_fn(chunk):
        T = len(chunk)
        rows = np.concatenate([np.arange(12) * len(targets) + k for k in chunk])
        Xc = design[rows].reshape(T, 12, -1).transpose(1, 0, 2).reshape(12 * T, -1)
        pred = stmodel.CurvePredictor(model, targets[chunk], Xc)
        return np.stack([pred(d) for d in draws])

    chunks = [list(range(k, min(k + chunk_size, len(targets)))) for k in range(0, len(targets), chunk_size)]
    n_workers = worker_count(threads)

    def work(chunk):
        return _target_chunk(curves_fn, api, api_max, error_threshold, chunk)

    if n_workers == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(work, chunks))
    results = []
    for chunk, part in zip(chunks, parts):
        for k, (summ, ent, curves) in zip(chunk, part):
            results.append(TargetResult(tuple(targets[k]), summ, ent, curves, float(api[k])))

    categories = seasonal.assign_categories(
        [r.summary.index_median for r in results], [r.summary.modality for r in results]
    )
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    feat_rows, mpi_rows, prop_rows = [], [], []
    for r, cat in zip(results, categories):
        lon, lat = num(r.location[0]), num(r.location[1])
        s = r.summary
        base = [lon, lat, num(r.entropy), num(s.index_median), cat,
                "" if s.modality is None else s.modality, num(s.modality_probability)]
        if not s.seasons:
            feat_rows.append(base + [""] * 9)
        for season in s.seasons:
            feat_rows.append(
                base
                + [
                    season.rank,
                    season.start_month, num(season.start_dev),
                    season.end_month, num(season.end_dev),
                    season.peak_month, num(season.peak_dev),
                    num(season.length_months),
                    int(season.rank == 1),
                ]
            )
        lo, med, hi = np.percentile(r.curves, [2.5, 50.0, 97.5], axis=0)
        for m in range(12):
            prop_rows.append([lon, lat, m + 1, num(med[m]), num(lo[m]), num(hi[m])])
            mpi_rows.append([lon, lat, m + 1, num(med[m] * r.api), num(lo[m] * r.api), num(hi[m] * r.api)])
    _write_csv(out / FEATURES_FILE, FEATURES_HEADER, feat_rows)
    _write_csv(out / MPI_FILE, MPI_HEADER, mpi_rows)
    _write_csv(out / PROPORTIONS_FILE, PROPORTIONS_HEADER, prop_rows)
    return results
