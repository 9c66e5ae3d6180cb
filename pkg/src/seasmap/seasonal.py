"""Seasonality features derived from monthly proportion curves.

Month ``i`` sits at angle ``2 pi i / 12`` (December at 0). Curves are
summarised by their KL divergence from uniform, a least-squares fit of a
rescaled one- or two-component von Mises density, and transmission seasons:
maximal cyclic runs of months where the fitted density is at least 1/12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, ValidationError
from .numerics import (
    TWO_PI,
    angle_to_month,
    bessel_i0e,
    circular_deviation,
    circular_median,
    month_to_angle,
    nelder_mead_batch,
    wrap_angle,
)

ERROR_THRESHOLD = 0.0015
ENTROPY_TOL = 1e-12
UNIFORM = 1.0 / 12.0
GRID = TWO_PI * np.arange(1, 13) / 12.0
MONTHS_PER_RADIAN = 12.0 / TWO_PI
CATEGORIES = ("Non-seasonal", "Low", "Medium", "High")


def _as_curve(curve):
    p = np.asarray(curve, dtype=float).reshape(-1)
    if p.shape != (12,):
        raise ValidationError(f"a proportion curve has 12 entries, got {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError("proportions must be non-negative and sum to 1")
    return p


def kl_entropy(curve):
    """Kullback-Leibler divergence from the uniform curve, in bits."""
    p = _as_curve(curve)
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(12.0 * p[nz])))


def seasonality_index(curve, api, api_max):
    """Entropy scaled by relative annual incidence, ``D * api / api_max``."""
    if not api_max > 0:
        raise ValidationError("api_max must be positive")
    if api < 0:
        raise ValidationError("api must be non-negative")
    return kl_entropy(curve) * api / api_max


def monthly_incidence(curve, api):
    """Monthly incidence: each month's proportion times the annual incidence."""
    if api < 0:
        raise ValidationError("api must be non-negative")
    return _as_curve(curve) * api


# ---------------------------------------------------------------------------
# Rescaled von Mises densities
# ---------------------------------------------------------------------------

@dataclass
class RvMFit:
    s: float
    omega: float
    mu1: float
    kappa1: float
    mu2: float = 0.0
    kappa2: float = 0.0
    n_components: int = 1
    sse: float = 0.0

    def __call__(self, theta):
        return rvm_density(theta, self)


def _vm(theta, mu, kappa):
    # exp(kappa cos(t - mu)) / (2 pi I0(kappa)) via the scaled Bessel function
    return np.exp(kappa * (np.cos(theta - mu) - 1.0)) / (TWO_PI * bessel_i0e(kappa))


def rvm_density(theta, fit):
    """``s * [omega f1 + (1 - omega) f2]`` at angle(s) ``theta``."""
    theta = np.asarray(theta, dtype=float)
    val = fit.omega * _vm(theta, fit.mu1, fit.kappa1)
    if fit.n_components == 2:
        val = val + (1.0 - fit.omega) * _vm(theta, fit.mu2, fit.kappa2)
    out = fit.s * val
    return out if out.ndim else float(out)


# The optimiser works on bare component amplitudes, c_k * exp(kappa_k (cos(t - mu_k) - 1)),
# which spans the same family as the rescaled mixture without a Bessel call
# per evaluation: c_k = s * omega_k / (2 pi exp(-kappa_k) I0(kappa_k)).
# One component: (log c, mu, t) with kappa = t^2.
# Two components: (u1, mu1, t1, u2, mu2, t2) with c_k = u_k^2, kappa_k = t_k^2.
_COS_GRID = np.cos(GRID)
_SIN_GRID = np.sin(GRID)


def _bump(mu, t):
    # cos(g - mu) = cos g cos mu + sin g sin mu
    c = np.cos(mu)[:, None] * _COS_GRID + np.sin(mu)[:, None] * _SIN_GRID
    return np.exp((t * t)[:, None] * (c - 1.0))


def _grid_values_1(params):
    return np.exp(params[:, 0])[:, None] * _bump(params[:, 1], params[:, 2])


def _grid_values_2(params):
    return (params[:, 0] ** 2)[:, None] * _bump(params[:, 1], params[:, 2]) + (
        params[:, 3] ** 2
    )[:, None] * _bump(params[:, 4], params[:, 5])


def _amplitude(s, omega, kappa):
    return s * omega / (TWO_PI * bessel_i0e(kappa))


def _local_maxima(p):
    """Month indices (0-based) of cyclic local maxima, highest first."""
    prev = np.roll(p, 1)
    nxt = np.roll(p, -1)
    idx = np.flatnonzero((p > prev) & (p >= nxt))
    if idx.size == 0:
        idx = np.array([int(np.argmax(p))])
    return idx[np.argsort(-p[idx], kind="stable")]


_S0 = TWO_PI / 12.0
_NM_OPTIONS = {"xatol": 1e-5, "fatol": 1e-12}
_MAX_ITER = {1: 1000, 2: 1000}
_STEP_1 = np.array([0.1, 0.3, 0.3])
_STEP_2 = np.array([0.05, 0.3, 0.3, 0.05, 0.3, 0.3])


def _starts_1(p):
    peaks = _local_maxima(p)
    top = GRID[peaks[0]]
    second = GRID[peaks[1]] if peaks.size > 1 else top + math.pi
    return [
        [math.log(_amplitude(_S0, 1.0, 2.0)), top, math.sqrt(2.0)],
        [math.log(_amplitude(_S0, 1.0, 0.5)), top, math.sqrt(0.5)],
        [math.log(_amplitude(_S0, 1.0, 2.0)), second, math.sqrt(2.0)],
    ]


def _starts_2(p, one):
    peaks = _local_maxima(p)
    top = GRID[peaks[0]]
    second = GRID[peaks[1]] if peaks.size > 1 else top + math.pi
    u_one = math.sqrt(_amplitude(one.s, 1.0, one.kappa1))
    u_major = math.sqrt(_amplitude(_S0, 0.6, 2.0))
    u_minor = math.sqrt(_amplitude(_S0, 0.4, 2.0))
    k0 = math.sqrt(2.0)
    return [
        [u_one, one.mu1, math.sqrt(one.kappa1), 0.0, second, k0],
        [u_major, top, k0, u_minor, second, k0],
        [u_major, top, k0, u_minor, top + math.pi, k0],
    ]


def _run_starts(curves, starts, grid_fn, step, max_iter):
    n_starts = len(starts[0])
    flat = np.array([s for per in starts for s in per], dtype=float)
    owners_curve = np.repeat(np.arange(len(curves)), n_starts)

    def sse(points, owners):
        resid = grid_fn(points) - curves[owners_curve[owners]]
        return np.sum(resid * resid, axis=1)

    x, f, _ = nelder_mead_batch(sse, flat, initial_step=step, max_iter=max_iter, **_NM_OPTIONS)
    f = f.reshape(len(curves), n_starts)
    best = np.argmin(f, axis=1)
    rows = np.arange(len(curves)) * n_starts + best
    if not np.all(np.isfinite(f[np.arange(len(curves)), best])):
        raise FitError("von Mises least-squares fit failed from every start")
    return x[rows], f[np.arange(len(curves)), best]


def _fit_from_1(params, sse):
    kappa = float(params[2] ** 2)
    return RvMFit(
        s=float(np.exp(params[0]) * TWO_PI * bessel_i0e(kappa)),
        omega=1.0,
        mu1=float(wrap_angle(params[1])),
        kappa1=kappa,
        n_components=1,
        sse=float(sse),
    )


def _fit_from_2(params, sse):
    k1, k2 = float(params[2] ** 2), float(params[5] ** 2)
    m1 = float(params[0] ** 2) * TWO_PI * bessel_i0e(k1)
    m2 = float(params[3] ** 2) * TWO_PI * bessel_i0e(k2)
    s = m1 + m2
    fit = RvMFit(
        s=s,
        omega=m1 / s if s > 0 else 1.0,
        mu1=float(wrap_angle(params[1])),
        kappa1=k1,
        mu2=float(wrap_angle(params[4])),
        kappa2=k2,
        n_components=2,
        sse=float(sse),
    )
    # the major component is the one whose mean carries the higher fitted density
    if rvm_density(fit.mu2, fit) > rvm_density(fit.mu1, fit):
        fit.omega = 1.0 - fit.omega
        fit.mu1, fit.mu2 = fit.mu2, fit.mu1
        fit.kappa1, fit.kappa2 = fit.kappa2, fit.kappa1
    return fit


def fit_rvm_batch(curves, components=1, one_component=None):
    """Least-squares rescaled von Mises fits for each row of ``curves``.

    Each row is fitted from several starts derived from its highest local
    maxima and the best optimum is kept. Two-component fits also start from
    the one-component optimum embedded with ``omega = 1``, so their error is
    never above the one-component error.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    if components not in (1, 2):
        raise ValidationError("components must be 1 or 2")
    if components == 1:
        starts = [_starts_1(p) for p in curves]
        x, f = _run_starts(curves, starts, _grid_values_1, _STEP_1, _MAX_ITER[1])
        return [_fit_from_1(xi, fi) for xi, fi in zip(x, f)]
    if one_component is None:
        one_component = fit_rvm_batch(curves, 1)
    starts = [_starts_2(p, one) for p, one in zip(curves, one_component)]
    x, f = _run_starts(curves, starts, _grid_values_2, _STEP_2, _MAX_ITER[2])
    return [_fit_from_2(xi, fi) for xi, fi in zip(x, f)]


def fit_rvm(curve, components=1):
    """Fit a rescaled one- or two-component von Mises density to one curve."""
    p = _as_curve(curve)
    if kl_entropy(p) <= ENTROPY_TOL:
        raise ValidationError("cannot fit a seasonal density to a uniform curve")
    return fit_rvm_batch(p[None, :], components)[0]


# ---------------------------------------------------------------------------
# Algorithm: seasons from a fitted curve
# ---------------------------------------------------------------------------

@dataclass
class Season:
    start: int
    end: int
    peak: int
    length: int
    major: bool


@dataclass
class SeasonFeatures:
    entropy: float
    modality: int | None
    seasons: list = field(default_factory=list)
    zero_case: bool = False
    fit: RvMFit | None = None
    fitted: np.ndarray | None = None
    index: float | None = None


def _runs(inseason):
    """Maximal cyclic runs of True as (start, end) 0-based month indices."""
    if inseason.all():
        return None
    out = []
    for i in range(12):
        if inseason[i] and not inseason[i - 1]:
            j = i
            while inseason[(j + 1) % 12]:
                j = (j + 1) % 12
            out.append((i, j))
    return out


def seasons_from_fit(fit):
    """Transmission seasons implied by a fitted density, major season first."""
    values = rvm_density(GRID, fit)
    inseason = values >= UNIFORM
    runs = _runs(inseason)
    if runs is None:
        # every month qualifies: one season starting after the lowest month
        lo = int(np.argmin(values))
        runs = [((lo + 1) % 12, lo)]
    means = [(fit.mu1, rvm_density(fit.mu1, fit))]
    if fit.n_components == 2:
        means.append((fit.mu2, rvm_density(fit.mu2, fit)))
    seasons = []
    for start, end in runs:
        length = (end - start) % 12 + 1
        members = {(start + k) % 12 + 1 for k in range(length)}
        cands = [(v, mu) for mu, v in means if angle_to_month(mu) in members]
        if cands:
            value, mu = max(cands)
            peak = angle_to_month(mu)
        else:
            idx = max(members, key=lambda m: (values[m - 1], -m))
            peak, value = idx, float(values[idx - 1])
        seasons.append((value, Season(start + 1, end + 1, peak, length, False)))
    seasons.sort(key=lambda vs: -vs[0])
    seasons[0][1].major = True
    return [s for _, s in seasons], values


def derive_features_batch(curves, error_threshold=ERROR_THRESHOLD, zero_case=None):
    """Seasonality features for each row of ``curves``.

    Rows with zero entropy get no seasons. The others get a one-component fit,
    escalated to two components when its sum of squared errors exceeds
    ``error_threshold``; modality is the number of resulting seasons.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    zero_case = np.zeros(len(curves), bool) if zero_case is None else np.asarray(zero_case, bool)
    entropy = np.array([kl_entropy(p) for p in curves])
    seasonal = np.flatnonzero(entropy > ENTROPY_TOL)
    fits = {}
    if seasonal.size:
        ones = fit_rvm_batch(curves[seasonal], 1)
        for k, f in zip(seasonal, ones):
            fits[k] = f
        need = [i for i, k in enumerate(seasonal) if ones[i].sse > error_threshold]
        if need:
            twos = fit_rvm_batch(curves[seasonal[need]], 2, [ones[i] for i in need])
            for i, f in zip(need, twos):
                fits[seasonal[i]] = f
    out = []
    for k in range(len(curves)):
        if k not in fits:
            out.append(SeasonFeatures(float(entropy[k]), None, [], bool(zero_case[k])))
            continue
        seasons, values = seasons_from_fit(fits[k])
        out.append(
            SeasonFeatures(float(entropy[k]), len(seasons), seasons, bool(zero_case[k]), fits[k], values)
        )
    return out


def derive_features(curve, error_threshold=ERROR_THRESHOLD, zero_case=False):
    """Seasonality features of one monthly proportion curve."""
    return derive_features_batch(_as_curve(curve)[None, :], error_threshold, [zero_case])[0]


# ---------------------------------------------------------------------------
# Summaries across posterior samples
# ---------------------------------------------------------------------------

@dataclass
class SeasonSummary:
    rank: int
    start_month: int
    start_dev: float
    end_month: int
    end_dev: float
    peak_month: int
    peak_dev: float
    length_months: float


@dataclass
class UncertaintySummary:
    modality: int | None
    modality_probability: float
    tie: bool
    n_samples: int
    n_used: int
    seasons: list
    index_median: float
    index_lo: float
    index_hi: float

    @property
    def discarded_fraction(self):
        return 1.0 - self.n_used / self.n_samples if self.n_samples else 0.0


def _month_summary(months):
    angles = month_to_angle(months)
    center = circular_median(angles)
    dev = circular_deviation(angles, center) * MONTHS_PER_RADIAN
    return angle_to_month(center), dev


def summarize_samples(features, index_samples=()):
    """Majority-vote modality plus circular summaries of season timing.

    Start, end and peak months of each season rank are summarised with the
    circular median and mean arc deviation (in months) over the samples that
    agree with the majority modality. An exact tie between unimodal and
    bimodal votes resolves to unimodal with ``tie=True``.
    """
    idx = np.asarray(list(index_samples), dtype=float)
    if idx.size:
        lo, med, hi = np.percentile(idx, [2.5, 50.0, 97.5])
    else:
        lo = med = hi = float("nan")
    with_seasons = [f for f in features if f.modality is not None]
    if not with_seasons:
        return UncertaintySummary(None, 0.0, False, len(features), 0, [], float(med), float(lo), float(hi))
    n1 = sum(f.modality == 1 for f in with_seasons)
    n2 = len(with_seasons) - n1
    modality = 1 if n1 >= n2 else 2
    tie = n1 == n2
    prob = max(n1, n2) / len(with_seasons)
    chosen = [f for f in with_seasons if f.modality == modality]
    seasons = []
    for rank in range(modality):
        picked = [f.seasons[rank] for f in chosen]
        start, start_dev = _month_summary([s.start for s in picked])
        end, end_dev = _month_summary([s.end for s in picked])
        peak, peak_dev = _month_summary([s.peak for s in picked])
        length = float(np.median([s.length for s in picked]))
        seasons.append(SeasonSummary(rank + 1, start, start_dev, end, end_dev, peak, peak_dev, length))
    return UncertaintySummary(
        modality, prob, tie, len(features), len(chosen), seasons, float(med), float(lo), float(hi)
    )


def assign_categories(index_values, modalities):
    """Seasonality categories from quartiles of positive indices, per modality.

    Indices at or below zero, below the first quartile, or at locations with
    no season are "Non-seasonal"; then "Low" up to the median, "Medium" up to
    the third quartile and "High" above it.
    """
    idx = np.asarray(index_values, dtype=float)
    mods = list(modalities)
    out = ["Non-seasonal"] * len(idx)
    for mod in (1, 2):
        members = [k for k, m in enumerate(mods) if m == mod]
        pos = idx[[k for k in members if idx[k] > 0]] if members else np.empty(0)
        if pos.size == 0:
            continue
        q1, q2, q3 = np.quantile(pos, [0.25, 0.5, 0.75])
        for k in members:
            v = idx[k]
            if not v > 0 or v < q1:
                continue
            out[k] = "Low" if v < q2 else "Medium" if v < q3 else "High"
    return out
