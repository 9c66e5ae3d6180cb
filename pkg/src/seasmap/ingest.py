"""Facility counts and covariate grids: parsing, reduction and design rows."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, DuplicateKeyError, ParseError, ValidationError

FACILITY_HEADER = ["facility_id", "lon", "lat", "year", "month", "cases"]
COVARIATE_HEADER = ["covariate", "month", "lon", "lat", "value"]

PROPORTION_OFFSET = 1e-5
LOG_OUTLIER_THRESHOLD = -11.0
DEFAULT_LAGS = (1, 2, 3)


@dataclass(frozen=True)
class FacilityRecord:
    facility_id: str
    lon: float
    lat: float
    year: int
    month: int
    cases: float | None


@dataclass
class FacilitySeries:
    facility_id: str
    lon: float
    lat: float
    median_counts: np.ndarray
    proportions: np.ndarray
    zero_case: bool = False

    @property
    def location(self):
        return (self.lon, self.lat)


@dataclass
class DropReport:
    entries: list = field(default_factory=list)

    def add(self, facility_id, reason):
        self.entries.append((facility_id, reason))

    def lines(self):
        return [f"DROPPED {fid} {reason}" for fid, reason in self.entries]

    def __len__(self):
        return len(self.entries)


class Observation(NamedTuple):
    location: int
    month: int
    value: float


def _open_text(source):
    if isinstance(source, io.TextIOBase):
        return source, None
    path = Path(source)
    return open(path, newline="", encoding="utf-8"), path


def _check_header(row, expected, path):
    got = [c.strip() for c in row] if row else []
    if got != expected:
        raise ParseError(f"expected header {','.join(expected)!r}, got {','.join(got)!r}", 1, path)


def load_facilities(path):
    """Read the facility CSV into a list of :class:`FacilityRecord`.

    An empty ``cases`` cell is kept as a missing observation (``None``).
    """
    fh, p = _open_text(path)
    records = []
    seen = {}
    with fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), FACILITY_HEADER, p)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(FACILITY_HEADER):
                raise ParseError(f"expected {len(FACILITY_HEADER)} fields, got {len(row)}", line, p)
            fid, lon, lat, year, month, cases = (c.strip() for c in row)
            if not fid:
                raise ParseError("empty facility_id", line, p)
            try:
                lon_f, lat_f = float(lon), float(lat)
                year_i, month_i = int(year), int(month)
                cases_f = float(cases) if cases else None
            except ValueError as exc:
                raise ParseError(str(exc), line, p) from None
            if not (math.isfinite(lon_f) and math.isfinite(lat_f)):
                raise ParseError("non-finite coordinate", line, p)
            if not 1 <= month_i <= 12:
                raise ValidationError(f"{p or '<stream>'}:{line}: month {month_i} outside 1..12")
            if cases_f is not None and not (cases_f >= 0 and math.isfinite(cases_f)):
                raise ValidationError(f"{p or '<stream>'}:{line}: cases must be a non-negative count")
            key = (fid, year_i, month_i)
            if key in seen:
                raise DuplicateKeyError(
                    f"{p or '<stream>'}:{line}: duplicate key {key} (first seen on line {seen[key]})"
                )
            seen[key] = line
            records.append(FacilityRecord(fid, lon_f, lat_f, year_i, month_i, cases_f))
    return records


def reduce_to_series(records):
    """Collapse per-year records into median monthly proportion curves.

    Returns
    -------
    series : list of FacilitySeries
        Sorted by facility id, so the result does not depend on row order.
    drops : DropReport
        Facilities without an observed value in some calendar month, or with
        inconsistent coordinates.
    """
    by_facility = defaultdict(list)
    for r in records:
        by_facility[r.facility_id].append(r)

    series = []
    drops = DropReport()
    for fid in sorted(by_facility):
        recs = by_facility[fid]
        coords = {(r.lon, r.lat) for r in recs}
        if len(coords) > 1:
            drops.add(fid, "inconsistent_coordinates")
            continue
        lon, lat = coords.pop()
        per_month = defaultdict(list)
        for r in recs:
            if r.cases is not None:
                per_month[r.month].append(r.cases)
        missing = [m for m in range(1, 13) if not per_month[m]]
        if missing:
            drops.add(fid, "missing_months=" + "|".join(str(m) for m in missing))
            continue
        medians = np.array([np.median(per_month[m]) for m in range(1, 13)], dtype=float)
        total = medians.sum()
        if total > 0:
            props = medians / total
            zero = False
        else:
            props = np.full(12, 1.0 / 12.0)
            zero = True
        series.append(FacilitySeries(fid, lon, lat, medians, props, zero))
    return series, drops


def apply_offset_and_rescale(curve, offset=PROPORTION_OFFSET):
    """Add ``offset`` to every monthly proportion and renormalise to sum 1."""
    p = np.asarray(curve, dtype=float)
    if np.any(p < 0):
        raise ValidationError("proportions must be non-negative")
    shifted = p + offset
    return shifted / shifted.sum()


def log_observations(series, offset=PROPORTION_OFFSET):
    """One :class:`Observation` per (facility index, month) of offset log proportions."""
    obs = []
    for j, s in enumerate(series):
        logp = np.log(apply_offset_and_rescale(s.proportions, offset))
        obs.extend(Observation(j, m, float(logp[m - 1])) for m in range(1, 13))
    return obs


def filter_outliers(observations, threshold=LOG_OUTLIER_THRESHOLD):
    """Drop observations whose log proportion is ``<= threshold``.

    Returns the kept observations and the number removed.
    """
    kept = [o for o in observations if o.value > threshold]
    return kept, len(observations) - len(kept)


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------

_LAG_RE = re.compile(r"^(?P<base>.+)_lag(?P<lag>\d+)$")


def column_name(name, lag):
    return name if lag == 0 else f"{name}_lag{lag}"


@dataclass
class CovariateStack:
    """Monthly covariate grids on one shared set of cells.

    ``grids[name]`` has shape ``(12, n_cells)``, row ``i`` holding calendar
    month ``i + 1``. ``stats[name]`` is the ``(mean, sd)`` pair used for
    standardisation; when not supplied it is computed over every (cell,
    month) entry.
    """

    cells: np.ndarray
    grids: dict
    lags: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float).reshape(-1, 2)
        for name, g in self.grids.items():
            g = np.asarray(g, dtype=float)
            if g.shape != (12, len(self.cells)):
                raise ValidationError(
                    f"covariate {name!r} has shape {g.shape}, expected (12, {len(self.cells)})"
                )
            self.grids[name] = g
            self.lags.setdefault(name, ())
            if name not in self.stats:
                sd = float(g.std(ddof=1)) if g.size > 1 else 0.0
                self.stats[name] = (float(g.mean()), sd)
        self._tree = cKDTree(self.cells)
        pad = [_half_step(self.cells[:, k]) for k in range(2)]
        self._lo = self.cells.min(axis=0) - pad
        self._hi = self.cells.max(axis=0) + pad

    @property
    def names(self):
        return list(self.grids)

    def column_names(self):
        """Every covariate followed by its lagged variants."""
        out = []
        for name in self.names:
            out.append(name)
            out.extend(column_name(name, lag) for lag in sorted(set(self.lags[name]) - {0}))
        return out

    def with_stats(self, stats):
        """Copy of the stack that standardises with externally supplied statistics."""
        return CovariateStack(self.cells, dict(self.grids), dict(self.lags), dict(stats))

    def standardized(self, name):
        mean, sd = self.stats[name]
        g = self.grids[name]
        if sd <= 0:
            return np.zeros_like(g)
        return (g - mean) / sd

    def parse_column(self, column):
        if column in self.grids:
            return column, 0
        m = _LAG_RE.match(column)
        if m and m["base"] in self.grids:
            return m["base"], int(m["lag"])
        raise ValidationError(f"unknown covariate {column!r}; available: {', '.join(self.names)}")

    def nearest_cells(self, locations):
        """Index of the nearest grid cell for each (lon, lat) location."""
        loc = np.asarray(locations, dtype=float).reshape(-1, 2)
        outside = np.any((loc < self._lo) | (loc > self._hi), axis=1)
        if np.any(outside):
            bad = loc[np.flatnonzero(outside)[0]]
            raise DomainError(
                f"location ({bad[0]:g}, {bad[1]:g}) lies outside the covariate grid "
                f"[{self._lo[0]:g}, {self._hi[0]:g}] x [{self._lo[1]:g}, {self._hi[1]:g}]"
            )
        return self._tree.query(loc)[1]

    def contains(self, locations):
        loc = np.asarray(locations, dtype=float).reshape(-1, 2)
        return ~np.any((loc < self._lo) | (loc > self._hi), axis=1)


def _half_step(values):
    u = np.unique(values)
    if u.size < 2:
        return 0.0
    return 0.5 * float(np.min(np.diff(u)))


def load_covariates(path, lags=DEFAULT_LAGS):
    """Read a long-format covariate CSV into a :class:`CovariateStack`."""
    fh, p = _open_text(path)
    values = {}
    cells = {}
    with fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), COVARIATE_HEADER, p)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(COVARIATE_HEADER):
                raise ParseError(f"expected {len(COVARIATE_HEADER)} fields, got {len(row)}", line, p)
            name, month, lon, lat, value = (c.strip() for c in row)
            try:
                month_i = int(month)
                cell = (float(lon), float(lat))
                val = float(value)
            except ValueError as exc:
                raise ParseError(str(exc), line, p) from None
            if not 1 <= month_i <= 12:
                raise ValidationError(f"{p or '<stream>'}:{line}: month {month_i} outside 1..12")
            if not math.isfinite(val):
                raise ParseError("non-finite covariate value", line, p)
            key = (name, month_i, cell)
            if key in values:
                raise DuplicateKeyError(f"{p or '<stream>'}:{line}: duplicate covariate entry {key}")
            values[key] = val
            cells.setdefault(cell, len(cells))

    names = sorted({k[0] for k in values})
    cell_list = sorted(cells)
    index = {c: i for i, c in enumerate(cell_list)}
    grids = {}
    for name in names:
        g = np.full((12, len(cell_list)), np.nan)
        for (n, m, c), v in values.items():
            if n == name:
                g[m - 1, index[c]] = v
        if np.isnan(g).any():
            months = sorted({m + 1 for m in np.nonzero(np.isnan(g))[0]})
            raise ValidationError(
                f"covariate {name!r} lacks values for some cells in months {months}; "
                "all covariates must share one grid"
            )
        grids[name] = g
    return CovariateStack(np.array(cell_list), grids, {n: tuple(lags) for n in names})


def build_design(stack, locations, selected):
    """Design matrix with one row per (month, location) node.

    Row ``(i - 1) * n + j`` is month ``i`` at location ``j``: an intercept
    followed by each selected covariate's standardised value at month
    ``i - lag`` (wrapped into 1..12) in the location's nearest grid cell.
    """
    parsed = [stack.parse_column(c) for c in selected]
    cell_idx = stack.nearest_cells(locations)
    n = len(cell_idx)
    months = np.arange(12)
    X = np.ones((12 * n, 1 + len(parsed)))
    for k, (name, lag) in enumerate(parsed):
        z = stack.standardized(name)
        src = (months - lag) % 12
        X[:, k + 1] = z[src][:, cell_idx].reshape(-1)
    return X
