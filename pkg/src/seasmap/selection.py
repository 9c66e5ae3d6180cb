"""Covariate screening and backwards DIC selection.

Candidates are first pruned by variance inflation factors, then removed one
at a time while a deletion strictly lowers the DIC. The default protocol
holds out a random test share of facilities, runs backwards selection on two
spatially interleaved halves of the training set and keeps whichever of the
two resulting covariate sets has the lower DIC on the whole training set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import stmodel
from .errors import FitError, SeasmapError, ValidationError
from .ingest import (
    LOG_OUTLIER_THRESHOLD,
    PROPORTION_OFFSET,
    build_design,
    filter_outliers,
    log_observations,
)

log = logging.getLogger(__name__)

VIF_THRESHOLD = 10.0
TEST_FRACTION = 0.30
INTERCEPT = "intercept"


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def split_train_test(facilities, test_fraction=TEST_FRACTION, seed=0):
    """Random split into ``(train, test)``; ``round(n * test_fraction)`` go to test.

    Both lists keep the input order.
    """
    n = len(facilities)
    if not 0 < test_fraction < 1:
        raise ValidationError("test_fraction must lie strictly between 0 and 1")
    if n < 4:
        raise ValidationError(f"need at least 4 facilities to split, got {n}")
    n_test = int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(seed)
    test_idx = set(rng.permutation(n)[:n_test].tolist())
    train = [f for k, f in enumerate(facilities) if k not in test_idx]
    test = [f for k, f in enumerate(facilities) if k in test_idx]
    return train, test


def _spread_bits(v):
    v = v.astype(np.uint64)
    out = np.zeros_like(v)
    for b in range(16):
        out |= ((v >> np.uint64(b)) & np.uint64(1)) << np.uint64(2 * b)
    return out


def morton_codes(lonlat, bits=16):
    """Interleaved-bit codes of lon/lat normalised to the points' bounding box."""
    pts = np.asarray(lonlat, dtype=float).reshape(-1, 2)
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    span[span == 0] = 1.0
    scale = (1 << bits) - 1
    q = np.floor((pts - lo) / span * scale + 0.5)
    return _spread_bits(q[:, 0]) | (_spread_bits(q[:, 1]) << np.uint64(1))


def split_training_halves(train, seed=0):
    """Two halves of equal size (+-1) and interleaved spatial coverage.

    Facilities are ordered along a Morton curve and dealt alternately to the
    halves. The seed breaks ties between equal codes and chooses which half
    receives the first facility.
    """
    n = len(train)
    if n < 8:
        raise ValidationError(f"need at least 8 training facilities to halve, got {n}")
    codes = morton_codes([f.location for f in train])
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(n)
    parity = int(rng.integers(2))
    order = np.lexsort((tiebreak, codes))
    halves = ([], [])
    for rank, k in enumerate(order):
        halves[(rank + parity) % 2].append(train[k])
    return halves


# ---------------------------------------------------------------------------
# Variance inflation
# ---------------------------------------------------------------------------

def variance_inflation(columns):
    """VIF of every column against the others, with an intercept in each regression.

    Columns that are exactly explained by the rest (including constant
    columns) get ``inf``.
    """
    names = sorted(columns)
    X = np.column_stack([np.asarray(columns[k], dtype=float) for k in names])
    n = X.shape[0]
    out = {}
    for k, name in enumerate(names):
        y = X[:, k]
        others = np.column_stack([np.ones(n), np.delete(X, k, axis=1)])
        coef, *_ = np.linalg.lstsq(others, y, rcond=None)
        resid = y - others @ coef
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        ss_res = float(resid @ resid)
        if ss_tot <= 0 or ss_res <= 1e-12 * ss_tot:
            out[name] = math.inf
        else:
            out[name] = ss_tot / ss_res
    return out


def vif_prune(columns, threshold=VIF_THRESHOLD):
    """Drop the highest-VIF covariate until every VIF is below ``threshold``.

    Returns the kept names (sorted) and the trace of ``(removed, vif)``.
    Ties go to the alphabetically first name.
    """
    cols = dict(columns)
    if len(cols) < 2:
        return sorted(cols), []
    lengths = {len(np.asarray(v)) for v in cols.values()}
    if len(lengths) != 1:
        raise ValidationError("covariate columns must have equal length")
    if lengths.pop() <= len(cols):
        raise ValidationError("VIF needs more observations than covariates")
    trace = []
    while len(cols) >= 2:
        vifs = variance_inflation(cols)
        worst = max(vifs.values())
        if worst < threshold:
            break
        name = min(k for k, v in vifs.items() if v == worst)
        trace.append((name, worst))
        del cols[name]
    return sorted(cols), trace


# ---------------------------------------------------------------------------
# Backwards selection
# ---------------------------------------------------------------------------

@dataclass
class FitSettings:
    beta_prior_var: float = stmodel.BETA_PRIOR_VAR
    stationary: bool = False
    max_iter: int = 400
    dic_seed: int = 0
    n_dic_draws: int = stmodel.DIC_DRAWS
    warm_step: float = 0.25


@dataclass
class DicEntry:
    stage: str
    step: int
    covariates: tuple
    dic: float
    accepted: bool


@dataclass
class SelectionReport:
    vif_trace: list = field(default_factory=list)
    dic_trace: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    final_covariates: list = field(default_factory=list)
    split: dict = field(default_factory=dict)
    candidates: dict = field(default_factory=dict)
    final_dic: float = math.nan

    def accepted_path(self, stage=None):
        return [e for e in self.dic_trace if e.accepted and (stage is None or e.stage == stage)]

    def lines(self):
        out = []
        sp = self.split
        if sp:
            out.append(f"SPLIT seed={sp.get('seed')} test_fraction={sp.get('test_fraction')}")
            out.append("TRAIN " + ",".join(sp.get("train", [])))
            out.append("TEST " + ",".join(sp.get("test", [])))
            for key in ("half_a", "half_b"):
                if key in sp:
                    out.append(f"{key.upper()} " + ",".join(sp[key]))
        for name, v in self.vif_trace:
            out.append(f"VIF_REMOVE {name} vif={_fmt(v)}")
        for e in self.dic_trace:
            model = "+".join((INTERCEPT,) + tuple(e.covariates))
            flag = "yes" if e.accepted else "no"
            out.append(f"DIC stage={e.stage} step={e.step} model={model} dic={_fmt(e.dic)} accepted={flag}")
        for stage, step, covs, reason in self.failures:
            model = "+".join((INTERCEPT,) + tuple(covs))
            out.append(f"FIT_FAILED stage={stage} step={step} model={model} reason={reason}")
        for stage, covs in sorted(self.candidates.items()):
            out.append(f"CANDIDATE {stage} " + ",".join(covs))
        out.append("FINAL " + ",".join(self.final_covariates) + f" dic={_fmt(self.final_dic)}")
        return out

    def text(self):
        return "\n".join(self.lines()) + "\n"


def _fmt(v):
    return "inf" if v == math.inf else repr(float(v))


def _fit_subset(data, covs, settings, start):
    sub = data.subset_columns([INTERCEPT] + list(covs))
    kwargs = {}
    if start is not None:
        kwargs["initial_step"] = settings.warm_step
    return stmodel.fit(
        sub,
        start=start,
        beta_prior_var=settings.beta_prior_var,
        stationary=settings.stationary,
        max_iter=settings.max_iter,
        dic_seed=settings.dic_seed,
        n_dic_draws=settings.n_dic_draws,
        with_posterior=False,
        **kwargs,
    )


def backwards_select(data, candidates, settings=None, stage="full", report=None):
    """Backwards elimination by DIC from the full candidate set.

    ``data`` must carry an intercept column plus every candidate. At each
    step every single-covariate deletion is fitted (warm-started from the
    current model) and the deletion giving the lowest DIC is accepted if it
    is strictly below the current DIC. Ties between deletions go to the
    alphabetically first removed name. Failed fits are logged and skipped.

    Returns the report and the fitted model of the selected set.
    """
    settings = settings or FitSettings()
    report = report if report is not None else SelectionReport()
    current = tuple(sorted(candidates))
    model = _fit_subset(data, current, settings, None)
    report.dic_trace.append(DicEntry(stage, 0, current, model.dic, True))
    step = 0
    while current:
        step += 1
        best = None
        for name in current:
            covs = tuple(c for c in current if c != name)
            try:
                trial = _fit_subset(data, covs, settings, model.hyper)
            except SeasmapError as exc:
                log.warning("fit failed for %s: %s", covs, exc)
                report.failures.append((stage, step, covs, type(exc).__name__))
                continue
            report.dic_trace.append(DicEntry(stage, step, covs, trial.dic, False))
            if best is None or trial.dic < best[1].dic:
                best = (covs, trial, len(report.dic_trace) - 1)
        if best is None or not best[1].dic < model.dic:
            break
        current, model, pos = best
        report.dic_trace[pos].accepted = True
    report.final_covariates = list(current)
    report.final_dic = model.dic
    return report, model


def assemble_data(series, stack, columns, offset=PROPORTION_OFFSET, threshold=LOG_OUTLIER_THRESHOLD):
    """Training data for ``series``: offset log proportions minus outliers, plus design rows."""
    obs, _ = filter_outliers(log_observations(series, offset), threshold)
    locations = np.array([s.location for s in series], dtype=float)
    design = build_design(stack, locations, list(columns))
    return stmodel.ModelData.from_nodes(locations, obs, design, [INTERCEPT] + list(columns))


def stack_builder(stack, offset=PROPORTION_OFFSET, threshold=LOG_OUTLIER_THRESHOLD):
    """``builder(series, columns)`` for :func:`select_covariates` backed by a covariate stack."""

    def builder(series, columns):
        return assemble_data(series, stack, columns, offset, threshold)

    return builder


def select_covariates(
    series,
    builder,
    candidates,
    settings=None,
    seed=0,
    test_fraction=TEST_FRACTION,
    vif_threshold=VIF_THRESHOLD,
    single_pass=False,
):
    """Full selection protocol; returns a :class:`SelectionReport`.

    ``builder(series_subset, columns)`` returns the :class:`ModelData` of a
    facility subset with an intercept plus ``columns``. With ``single_pass``
    one backwards selection runs on the whole training set. Otherwise the
    training set is halved, each half is selected separately and both
    outcomes are refitted on the whole training set; the lower DIC wins
    (ties to the smaller, then alphabetically first set).
    """
    settings = settings or FitSettings()
    candidates = list(candidates)
    train, test = split_train_test(series, test_fraction, seed)
    report = SelectionReport(
        split={
            "seed": seed,
            "test_fraction": test_fraction,
            "train": [s.facility_id for s in train],
            "test": [s.facility_id for s in test],
        }
    )
    full = builder(train, candidates)
    if len(candidates) >= 2:
        cols = {c: full.X[:, k + 1] for k, c in enumerate(candidates)}
        kept, report.vif_trace = vif_prune(cols, vif_threshold)
    else:
        kept = sorted(candidates)

    if single_pass:
        _, model = backwards_select(full, kept, settings, "single", report)
        report.candidates["single"] = list(report.final_covariates)
        return report

    half_a, half_b = split_training_halves(train, seed)
    report.split["half_a"] = [s.facility_id for s in half_a]
    report.split["half_b"] = [s.facility_id for s in half_b]
    outcomes = {}
    for stage, half in (("half_a", half_a), ("half_b", half_b)):
        data = builder(half, kept)
        try:
            backwards_select(data, kept, settings, stage, report)
        except SeasmapError as exc:
            log.warning("selection on %s failed: %s", stage, exc)
            report.failures.append((stage, 0, tuple(kept), type(exc).__name__))
            continue
        outcomes[stage] = tuple(report.final_covariates)
        report.candidates[stage] = list(report.final_covariates)
    if not outcomes:
        raise FitError("backwards selection failed on both training halves")

    full_kept = full.subset_columns([INTERCEPT] + kept)
    scored = []
    for covs in sorted(set(outcomes.values()), key=lambda c: (len(c), c)):
        try:
            m = _fit_subset(full_kept, covs, settings, None)
        except SeasmapError as exc:
            report.failures.append(("refit", 0, covs, type(exc).__name__))
            continue
        report.dic_trace.append(DicEntry("refit", 0, covs, m.dic, False))
        scored.append((m.dic, len(report.dic_trace) - 1, covs))
    if not scored:
        raise FitError("both candidate models failed to refit on the training set")
    dic_best, pos, covs = min(scored, key=lambda t: t[0])
    report.dic_trace[pos].accepted = True
    report.final_covariates = list(covs)
    report.final_dic = dic_best
    return report
