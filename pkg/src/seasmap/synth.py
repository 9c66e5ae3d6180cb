"""Synthetic facility datasets drawn from the spatiotemporal model itself.

Locations are uniform in a lon/lat box, covariates are smooth seasonal
waves whose phase drifts west to east, the field is an exact draw from the
separable Matérn x AR(1) covariance and monthly counts are multinomial
splits of a log-normal annual total. The truth record keeps every latent
quantity so downstream estimates can be scored.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import COVARIATE_HEADER, FACILITY_HEADER, CovariateStack, build_design
from .stmodel import ModelData, _cholesky_jitter, ar1_matrix, haversine_km, matern_cov


@dataclass
class SeasonalCovariate:
    """``amplitude * cos(2 pi (month - phase) / 12)`` plus optional extras.

    ``phase = peak_month + phase_drift * u`` where ``u`` runs from 0 at the
    west edge of the box to 1 at the east edge.
    """

    name: str
    peak_month: float
    amplitude: float = 1.0
    phase_drift: float = 0.0
    second_harmonic: float = 0.0
    noise: float = 0.1

    def values(self, month, u, rng):
        phase = self.peak_month + self.phase_drift * u
        arg = 2.0 * math.pi * (month - phase) / 12.0
        out = self.amplitude * np.cos(arg) + self.second_harmonic * np.cos(2.0 * arg)
        if self.noise > 0:
            out = out + self.noise * rng.standard_normal(out.shape)
        return out


def default_covariates():
    return [
        SeasonalCovariate("rain", peak_month=2.0, phase_drift=2.0),
        SeasonalCovariate("temp", peak_month=11.0, phase_drift=-1.5, second_harmonic=0.3),
    ]


@dataclass
class SynthSpec:
    n_locations: int = 50
    lon_range: tuple = (46.0, 48.0)
    lat_range: tuple = (-20.0, -18.0)
    sigma_e2: float = 0.326
    sigma_f2: float = 0.245
    kappa: float = 0.02
    a: float = 0.756
    beta: dict = field(default_factory=lambda: {"intercept": -2.5, "rain": 0.5, "temp": 0.3})
    covariates: list = field(default_factory=default_covariates)
    lags: tuple = (1, 2, 3)
    grid_shape: tuple = (16, 16)
    cases_scale: float = 500.0
    cases_sdlog: float = 0.5
    years: int = 4
    first_year: int = 2013
    gap_rate: float = 0.0
    stationary: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_locations < 2:
            raise ValueError("n_locations must be at least 2")
        if self.years < 1:
            raise ValueError("years must be at least 1")
        if min(self.sigma_e2, self.sigma_f2) < 0 or self.kappa <= 0 or not abs(self.a) < 1:
            raise ValueError("invalid generative hyperparameters")


@dataclass
class SynthResult:
    facility_csv: str
    covariate_csv: str
    truth: dict

    def truth_text(self):
        return json.dumps(self.truth, sort_keys=True, indent=1)

    def write(self, outdir, prefix="synth"):
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "facilities": out / f"{prefix}_facilities.csv",
            "covariates": out / f"{prefix}_covariates.csv",
            "truth": out / f"{prefix}_truth.json",
        }
        paths["facilities"].write_text(self.facility_csv, encoding="utf-8")
        paths["covariates"].write_text(self.covariate_csv, encoding="utf-8")
        paths["truth"].write_text(self.truth_text(), encoding="utf-8")
        return paths


def _fmt(v):
    return repr(float(v))


def _round_sig(a, digits=10):
    return np.array([float(f"{v:.{digits}g}") for v in np.ravel(a)]).reshape(np.shape(a))


def generate(spec):
    """Draw one synthetic dataset; identical specs give byte-identical output."""
    rng = np.random.default_rng(spec.seed)
    (lon0, lon1), (lat0, lat1) = spec.lon_range, spec.lat_range

    gx = np.linspace(lon0, lon1, spec.grid_shape[0])
    gy = np.linspace(lat0, lat1, spec.grid_shape[1])
    cells = np.array([(x, y) for x in gx for y in gy])
    cells = _round_sig(cells, 12)
    u = (cells[:, 0] - lon0) / (lon1 - lon0) if lon1 > lon0 else np.zeros(len(cells))
    months = np.arange(1, 13)[:, None]
    grids = {}
    for cov in spec.covariates:
        grids[cov.name] = _round_sig(cov.values(months, u[None, :], rng))
    stack = CovariateStack(cells, grids, {c.name: tuple(spec.lags) for c in spec.covariates})

    while True:
        loc = np.column_stack(
            [rng.uniform(lon0, lon1, spec.n_locations), rng.uniform(lat0, lat1, spec.n_locations)]
        )
        loc = np.round(loc, 6)
        d = haversine_km(loc)
        if np.all(d[np.triu_indices(len(loc), 1)] > 0):
            break
    n = len(loc)

    terms = [t for t in spec.beta if t != "intercept"]
    X = build_design(stack, loc, terms)
    beta = np.array([spec.beta.get("intercept", 0.0)] + [spec.beta[t] for t in terms])

    if spec.sigma_f2 > 0:
        LA = np.linalg.cholesky(ar1_matrix(spec.a, spec.stationary))
        LM = _cholesky_jitter(matern_cov(d, 1.0, spec.kappa), what="Matérn matrix")
        Z = rng.standard_normal((12, n))
        phi = math.sqrt(spec.sigma_f2) * (LA @ Z @ LM.T)
    else:
        phi = np.zeros((12, n))
        rng.standard_normal((12, n))
    eps = math.sqrt(spec.sigma_e2) * rng.standard_normal((12, n))
    log_p = (X @ beta).reshape(12, n) + phi + eps
    w = np.exp(log_p - log_p.max(axis=0, keepdims=True))
    props = w / w.sum(axis=0, keepdims=True)

    totals = np.exp(math.log(spec.cases_scale) + spec.cases_sdlog * rng.standard_normal(n))
    ids = [f"HF{j + 1:04d}" for j in range(n)]
    fac = io.StringIO()
    fac.write(",".join(FACILITY_HEADER) + "\n")
    for j in range(n):
        total = int(round(totals[j]))
        for k in range(spec.years):
            counts = rng.multinomial(total, props[:, j])
            gaps = rng.random(12) < spec.gap_rate if spec.gap_rate > 0 else np.zeros(12, bool)
            for mth in range(12):
                cell = "" if gaps[mth] else str(int(counts[mth]))
                fac.write(
                    f"{ids[j]},{_fmt(loc[j, 0])},{_fmt(loc[j, 1])},{spec.first_year + k},{mth + 1},{cell}\n"
                )

    cov = io.StringIO()
    cov.write(",".join(COVARIATE_HEADER) + "\n")
    for name in stack.names:
        g = stack.grids[name]
        for mth in range(12):
            for c in range(len(cells)):
                cov.write(f"{name},{mth + 1},{_fmt(cells[c, 0])},{_fmt(cells[c, 1])},{_fmt(g[mth, c])}\n")

    spec_dict = asdict(spec)
    truth = {
        "spec": spec_dict,
        "facility_ids": ids,
        "locations": loc.tolist(),
        "terms": ["intercept"] + terms,
        "beta": beta.tolist(),
        "design": X.tolist(),
        "phi": phi.tolist(),
        "log_p": log_p.tolist(),
        "proportions": props.T.tolist(),
        "annual_totals": totals.tolist(),
        "standardization": {k: list(v) for k, v in stack.stats.items()},
    }
    return SynthResult(fac.getvalue(), cov.getvalue(), truth)


def truth_model_data(truth):
    """Model data holding the generative log proportions, before normalisation.

    Every (month, location) node is observed and the design is the true one.
    """
    loc = np.asarray(truth["locations"], dtype=float)
    n = len(loc)
    month = np.repeat(np.arange(1, 13), n)
    site = np.tile(np.arange(n), 12)
    y = np.asarray(truth["log_p"], dtype=float).reshape(-1)
    return ModelData(loc, site, month, y, np.asarray(truth["design"]), list(truth["terms"]))


def target_grid(spec, n_side=20):
    """Regular ``n_side x n_side`` lon/lat prediction grid inside the spec's box."""
    (lon0, lon1), (lat0, lat1) = spec.lon_range, spec.lat_range
    gx = np.linspace(lon0, lon1, n_side + 2)[1:-1]
    gy = np.linspace(lat0, lat1, n_side + 2)[1:-1]
    return np.round(np.array([(x, y) for x in gx for y in gy]), 6)


def api_surface(spec, n_side=16, peak=200.0):
    """Smooth annual incidence surface on a grid over the box, zero in its far corner.

    Returns ``(points, api)``.
    """
    (lon0, lon1), (lat0, lat1) = spec.lon_range, spec.lat_range
    gx = np.linspace(lon0, lon1, n_side)
    gy = np.linspace(lat0, lat1, n_side)
    pts = np.array([(x, y) for x in gx for y in gy])
    u = (pts[:, 0] - lon0) / (lon1 - lon0) if lon1 > lon0 else np.zeros(len(pts))
    v = (pts[:, 1] - lat0) / (lat1 - lat0) if lat1 > lat0 else np.zeros(len(pts))
    bump = np.exp(-((u - 0.3) ** 2 + (v - 0.6) ** 2) / 0.15)
    api = np.where(bump < 0.05, 0.0, peak * bump)
    return np.round(pts, 6), _round_sig(api)


def points_csv(points, values=None, name="api"):
    out = io.StringIO()
    out.write("lon,lat" + (f",{name}" if values is not None else "") + "\n")
    for k, (x, y) in enumerate(points):
        row = f"{_fmt(x)},{_fmt(y)}"
        if values is not None:
            row += f",{_fmt(values[k])}"
        out.write(row + "\n")
    return out.getvalue()
