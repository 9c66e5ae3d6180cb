"""Log-linear spatiotemporal Gaussian model for monthly log proportions.

The response at month ``i`` and location ``j`` is

    y_ij = X_ij beta + phi_ij + eps_ij,

with ``beta ~ N(0, v I)``, ``eps ~ N(0, sigma_e2)`` and a separable field
``Cov(phi_ij, phi_i'j') = A(i, i') * sigma_f2 * M(j, j')``: ``M`` is the unit
Matérn (nu = 1) correlation on great-circle distances and ``A`` is the month
covariance of an AR(1) recursion started at January with a unit innovation.

Latent nodes are ordered month-major: node ``(i - 1) * n + j``. Everything
here is exact dense Gaussian algebra. Marginal likelihoods are evaluated in
observation space with the coefficients integrated out by the Woodbury
identity, which stays well conditioned for a flat coefficient prior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import FitError, NumericalError, SingularityError, ValidationError
from .numerics import bessel_k1, nelder_mead

EARTH_RADIUS_KM = 6371.0088
BETA_PRIOR_VAR = 1e6
DIC_DRAWS = 200
ARCHIVE_HEADER = "SEASMAP-MODEL v1"

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Hyperparameters:
    sigma_e2: float
    sigma_f2: float
    kappa: float
    a: float
    nu: float = field(default=1.0, init=False)

    def __post_init__(self):
        for name in ("sigma_e2", "sigma_f2", "kappa"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be positive and finite, got {v!r}")
        if not abs(self.a) < 1:
            raise ValidationError(f"AR coefficient must satisfy |a| < 1, got {self.a!r}")

    def to_unconstrained(self):
        return np.array(
            [math.log(self.sigma_e2), math.log(self.sigma_f2), math.log(self.kappa), math.atanh(self.a)]
        )

    @classmethod
    def from_unconstrained(cls, theta):
        t = np.asarray(theta, dtype=float)
        return cls(math.exp(t[0]), math.exp(t[1]), math.exp(t[2]), math.tanh(t[3]))

    def as_dict(self):
        return {"sigma_e2": self.sigma_e2, "sigma_f2": self.sigma_f2, "kappa": self.kappa, "a": self.a}


# ---------------------------------------------------------------------------
# Covariance building blocks
# ---------------------------------------------------------------------------

def haversine_km(a, b=None):
    """Great-circle distance matrix in km between (lon, lat) rows of ``a`` and ``b``."""
    a = np.radians(np.asarray(a, dtype=float).reshape(-1, 2))
    b = a if b is None else np.radians(np.asarray(b, dtype=float).reshape(-1, 2))
    dlon = a[:, None, 0] - b[None, :, 0]
    dlat = a[:, None, 1] - b[None, :, 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[:, None, 1]) * np.cos(b[None, :, 1]) * np.sin(dlon / 2) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    if b is a:
        # vectorised sin is not bitwise odd, so enforce exact symmetry
        d = np.triu(d) + np.triu(d, 1).T
    return d


def matern_cov(h, sigma_f2, kappa):
    """Matérn covariance with smoothness 1: ``sigma_f2 * (kappa h) * K1(kappa h)``.

    Returns exactly ``sigma_f2`` at ``h == 0``.
    """
    h = np.asarray(h, dtype=float)
    x = kappa * h
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        out[pos] = x[pos] * bessel_k1(x[pos])
    if out.ndim == 2 and out.shape[0] == out.shape[1] and np.array_equal(h, h.T):
        # the vectorised K1 can differ in the last bit between mirrored entries
        out = np.triu(out) + np.triu(out, 1).T
    out = sigma_f2 * out
    return out if out.ndim else float(out)


def ar1_matrix(a, stationary=False):
    """12x12 month covariance of the AR(1) field for a unit innovation variance.

    The default follows the recursion literally (January is a fresh
    innovation), so ``A(i, i') = a^|i-i'| * sum_{k < min(i, i')} a^(2k)``.
    With ``stationary=True`` every month has variance ``1 / (1 - a^2)``.
    """
    i = np.arange(1, 13)
    lag = np.abs(i[:, None] - i[None, :])
    if stationary:
        return a ** lag / (1.0 - a * a)
    k = np.minimum(i[:, None], i[None, :])
    if a * a == 1.0:
        acc = k.astype(float)
    else:
        acc = (1.0 - (a * a) ** k) / (1.0 - a * a)
    return a ** lag * acc


def _check_distinct(dist):
    n = dist.shape[0]
    off = dist + np.eye(n)
    if np.any(off <= 0):
        i, j = np.argwhere(np.triu(off <= 0, 1))[0]
        raise SingularityError(f"locations {i} and {j} coincide; the field covariance is singular")


def build_joint_covariance(locations, hyper, stationary=False):
    """Covariance of the field over all ``12 * n`` month-major nodes."""
    dist = haversine_km(locations)
    _check_distinct(dist)
    M = matern_cov(dist, hyper.sigma_f2, hyper.kappa)
    return np.kron(ar1_matrix(hyper.a, stationary), M)


def _cholesky_jitter(mat, max_rel=1e-8, what="matrix"):
    """Lower Cholesky factor, adding diagonal jitter up to ``max_rel * mean(diag)``."""
    scale = float(np.mean(np.diag(mat))) if mat.size else 1.0
    for rel in (0.0, 1e-14, 1e-12, 1e-10, max_rel):
        try:
            m = mat if rel == 0 else mat + rel * scale * np.eye(mat.shape[0])
            return linalg.cholesky(m, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    try:
        cond = np.linalg.cond(mat)
    except np.linalg.LinAlgError:
        cond = float("inf")
    raise NumericalError(f"{what} is not positive definite (condition number {cond:.3g})")


# ---------------------------------------------------------------------------
# Data container
# ---------------------------------------------------------------------------

@dataclass
class ModelData:
    """Observations and their design rows for one set of training locations.

    ``site`` indexes ``locations``, ``month`` runs 1..12 and ``X`` holds one
    design row per observation. ``names`` labels the design columns.
    """

    locations: np.ndarray
    site: np.ndarray
    month: np.ndarray
    y: np.ndarray
    X: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.site = np.asarray(self.site, dtype=int).reshape(-1)
        self.month = np.asarray(self.month, dtype=int).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        self.X = X if X.ndim == 2 and X.shape[0] == len(self.y) else X.reshape(len(self.y), -1)
        if not (len(self.site) == len(self.month) == len(self.y)):
            raise ValidationError("site, month and y must have equal length")
        if len(self.y) and (self.site.min() < 0 or self.site.max() >= self.n_locations):
            raise ValidationError("observation site index outside the location list")
        if len(self.y) and (self.month.min() < 1 or self.month.max() > 12):
            raise ValidationError("observation month outside 1..12")
        nodes = self.nodes
        if len(np.unique(nodes)) != len(nodes):
            raise ValidationError("at most one observation per (month, location) node")
        if not self.names:
            self.names = ["intercept"] + [f"x{k}" for k in range(1, self.X.shape[1])]

    @classmethod
    def from_nodes(cls, locations, observations, node_design, names=None):
        """Build from :class:`~seasmap.ingest.Observation` records and a full node design."""
        locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        n = len(locations)
        site = np.array([o.location for o in observations], dtype=int)
        month = np.array([o.month for o in observations], dtype=int)
        y = np.array([o.value for o in observations], dtype=float)
        node_design = np.asarray(node_design, dtype=float)
        X = node_design[(month - 1) * n + site] if len(y) else np.zeros((0, node_design.shape[1]))
        return cls(locations, site, month, y, X, list(names or []))

    @property
    def n_locations(self):
        return len(self.locations)

    @property
    def n_coef(self):
        return self.X.shape[1]

    @property
    def nodes(self):
        return (self.month - 1) * self.n_locations + self.site

    @cached_property
    def distances(self):
        d = haversine_km(self.locations)
        _check_distinct(d)
        return d

    @cached_property
    def complete(self):
        """True when every (month, location) node is observed exactly once."""
        return len(self.y) == 12 * self.n_locations

    @cached_property
    def grid_order(self):
        return np.argsort(self.nodes, kind="stable")

    def subset_columns(self, columns):
        idx = [self.names.index(c) for c in columns]
        return ModelData(self.locations, self.site, self.month, self.y, self.X[:, idx], list(columns))


def _field_blocks(data, hyper, stationary):
    A = ar1_matrix(hyper.a, stationary)
    M = matern_cov(data.distances, hyper.sigma_f2, hyper.kappa)
    return A, M


def _obs_factor(data, hyper, stationary):
    A, M = _field_blocks(data, hyper, stationary)
    mi = data.month - 1
    K = A[np.ix_(mi, mi)] * M[np.ix_(data.site, data.site)]
    K[np.diag_indices_from(K)] += hyper.sigma_e2
    try:
        L = linalg.cholesky(K, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError(
            f"observation covariance not positive definite for {hyper.as_dict()}"
        ) from None
    return A, M, L


class _GridSystem:
    """Marginal covariance of a complete grid in its Kronecker eigenbasis.

    With ``A = Ua diag(la) Ua'`` and ``M = Um diag(lm) Um'`` the covariance
    ``A (x) M + sigma_e2 I`` is diagonal after rotating by ``Ua (x) Um``, so
    the rotated field has independent components with prior variances
    ``p = la (x) lm`` and the likelihood costs one ``n x n`` eigensolve.
    """

    def __init__(self, data, hyper, beta_prior_var, stationary):
        la, Ua = linalg.eigh(ar1_matrix(hyper.a, stationary), check_finite=False)
        lm, Um = linalg.eigh(matern_cov(data.distances, 1.0, hyper.kappa), check_finite=False)
        if not (np.all(np.isfinite(la)) and np.all(np.isfinite(lm))):
            raise NumericalError(f"field covariance has non-finite eigenvalues for {hyper.as_dict()}")
        n, m = data.n_locations, data.n_coef
        order = data.grid_order
        self.sigma_e2 = hyper.sigma_e2
        self.beta_prior_var = beta_prior_var
        self.p = hyper.sigma_f2 * np.clip(np.outer(la, lm), 0.0, None).ravel()
        self.D = self.p + hyper.sigma_e2
        self.y = (Ua.T @ data.y[order].reshape(12, n) @ Um).ravel()
        Xg = data.X[order].reshape(12, n * m)
        Xg = (Ua.T @ Xg).reshape(12, n, m)
        self.X = np.einsum("ijk,jb->ibk", Xg, Um).reshape(12 * n, m)
        self.m = m
        if m:
            w = 1.0 / np.sqrt(self.D)
            B = self.X * w[:, None]
            P = np.eye(m) / beta_prior_var + B.T @ B
            try:
                self.Lp = linalg.cholesky(P, lower=True, check_finite=False)
            except linalg.LinAlgError:
                raise NumericalError("coefficient precision not positive definite") from None
            self.beta_mean = linalg.cho_solve((self.Lp, True), B.T @ (self.y * w), check_finite=False)

    def log_marginal(self):
        quad = float(np.sum(self.y * self.y / self.D))
        logdet = float(np.sum(np.log(self.D)))
        if self.m:
            c = self.Lp.T @ self.beta_mean
            quad -= float(c @ c)
            logdet += self.m * math.log(self.beta_prior_var) + 2.0 * float(np.sum(np.log(np.diag(self.Lp))))
        return -0.5 * (quad + logdet + self.y.size * _LOG_2PI)

    def dic(self, n_draws, seed):
        shrink = self.sigma_e2 / self.D
        trace = float(np.sum(self.p * shrink))
        beta = _beta_draws(self, n_draws, seed)
        resid_mean = shrink * (self.y - self.X @ self.beta_mean) if self.m else shrink * self.y
        resid = shrink[:, None] * (self.y[:, None] - self.X @ beta) if self.m else resid_mean[:, None]
        return _dic_terms(resid, resid_mean, trace, self.sigma_e2)


def log_marginal_likelihood(data, hyper, beta_prior_var=BETA_PRIOR_VAR, stationary=False):
    """Exact ``log N(y; 0, X v X' + C_phi + sigma_e2 I)``."""
    nobs, m = data.X.shape
    if nobs == 0:
        return 0.0
    if data.complete:
        return _GridSystem(data, hyper, beta_prior_var, stationary).log_marginal()
    _, _, L = _obs_factor(data, hyper, stationary)
    alpha = linalg.solve_triangular(L, data.y, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    quad = alpha @ alpha
    if m:
        B = linalg.solve_triangular(L, data.X, lower=True, check_finite=False)
        P = np.eye(m) / beta_prior_var + B.T @ B
        Lp = linalg.cholesky(P, lower=True, check_finite=False)
        c = linalg.solve_triangular(Lp, B.T @ alpha, lower=True, check_finite=False)
        quad -= c @ c
        logdet += m * math.log(beta_prior_var) + 2.0 * np.sum(np.log(np.diag(Lp)))
    return float(-0.5 * (quad + logdet + nobs * _LOG_2PI))


# ---------------------------------------------------------------------------
# Latent posterior
# ---------------------------------------------------------------------------

@dataclass
class LatentPosterior:
    """Joint Gaussian posterior of (coefficients, field nodes).

    ``cov_factor`` is a lower-triangular ``L`` with covariance ``L @ L.T``.
    """

    mean: np.ndarray
    cov_factor: np.ndarray
    n_coef: int
    n_locations: int
    design: np.ndarray | None = None
    beta_prior_var: float = BETA_PRIOR_VAR
    stationary: bool = False

    def __post_init__(self):
        # a fixed memory layout keeps BLAS summation order, and so draws, reproducible
        self.mean = np.ascontiguousarray(self.mean, dtype=float)
        self.cov_factor = np.ascontiguousarray(self.cov_factor, dtype=float)

    @property
    def beta_mean(self):
        return self.mean[: self.n_coef]

    @property
    def phi_mean(self):
        return self.mean[self.n_coef :].reshape(12, self.n_locations)

    def covariance(self):
        return self.cov_factor @ self.cov_factor.T

    def beta_sd(self):
        Lb = self.cov_factor[: self.n_coef]
        return np.sqrt(np.einsum("ij,ij->i", Lb, Lb))


def _joint_moments(data, hyper, beta_prior_var, stationary):
    n = data.n_locations
    nobs, m = data.X.shape
    A, M = _field_blocks(data, hyper, stationary)
    P = np.kron(A, M)
    if nobs == 0:
        mean = np.zeros(m + 12 * n)
        cov = linalg.block_diag(beta_prior_var * np.eye(m), P)
        return mean, cov
    _, _, L = _obs_factor(data, hyper, stationary)
    nodes = data.nodes
    alpha = linalg.solve_triangular(L, data.y, lower=True, check_finite=False)
    Z = linalg.solve_triangular(L, P[nodes, :], lower=True, check_finite=False)
    cov_phi = P - Z.T @ Z
    if m:
        B = linalg.solve_triangular(L, data.X, lower=True, check_finite=False)
        prec_beta = np.eye(m) / beta_prior_var + B.T @ B
        cov_beta = linalg.cho_solve(linalg.cho_factor(prec_beta, lower=True), np.eye(m))
        cov_beta = 0.5 * (cov_beta + cov_beta.T)
        mean_beta = cov_beta @ (B.T @ alpha)
        ZB = Z.T @ B
        mean_phi = Z.T @ (alpha - B @ mean_beta)
        cross = -ZB @ cov_beta
        cov_phi = cov_phi + ZB @ cov_beta @ ZB.T
        mean = np.concatenate([mean_beta, mean_phi])
        cov = np.block([[cov_beta, cross.T], [cross, cov_phi]])
    else:
        mean = Z.T @ alpha
        cov = cov_phi
    return mean, 0.5 * (cov + cov.T)


def latent_posterior(data, hyper, beta_prior_var=BETA_PRIOR_VAR, stationary=False):
    """Exact Gaussian posterior of ``(beta, phi)`` given the observations."""
    mean, cov = _joint_moments(data, hyper, beta_prior_var, stationary)
    factor = _cholesky_jitter(cov, what="posterior covariance")
    return LatentPosterior(
        mean, factor, data.n_coef, data.n_locations, data.X, beta_prior_var, stationary
    )


def _beta_draws(system, n_draws, seed):
    """Coefficient draws ``beta_mean + Lp^-T eps`` with ``eps`` of shape ``(m, n_draws)``.

    Rows of ``eps`` are filled in order, so models with nested coefficient
    lists share the leading random numbers.
    """
    eps = np.random.default_rng(seed).standard_normal((system.m, n_draws))
    if not system.m:
        return eps
    return system.beta_mean[:, None] + linalg.solve_triangular(
        system.Lp.T, eps, lower=False, check_finite=False
    )


def _dic_terms(resid, resid_mean, trace, sigma_e2):
    const = resid_mean.size * math.log(2.0 * math.pi * sigma_e2)
    mean_dev = const + (float(np.mean(np.sum(resid * resid, axis=0))) + trace) / sigma_e2
    dev_at_mean = const + float(resid_mean @ resid_mean) / sigma_e2
    p_d = mean_dev - dev_at_mean
    return mean_dev + p_d, p_d, mean_dev


class _DenseSystem:
    """Observation-space quantities for the DIC when some nodes are unobserved."""

    def __init__(self, data, hyper, beta_prior_var, stationary):
        _, _, L = _obs_factor(data, hyper, stationary)
        self.L = L
        self.m = data.n_coef
        self.sigma_e2 = hyper.sigma_e2
        self.y, self.X = data.y, data.X
        if self.m:
            KiX = self.solve(data.X)
            P = np.eye(self.m) / beta_prior_var + data.X.T @ KiX
            try:
                self.Lp = linalg.cholesky(P, lower=True, check_finite=False)
            except linalg.LinAlgError:
                raise NumericalError("coefficient precision not positive definite") from None
            self.beta_mean = linalg.cho_solve((self.Lp, True), data.X.T @ self.solve(data.y), check_finite=False)

    def solve(self, v):
        return linalg.cho_solve((self.L, True), v, check_finite=False)

    def dic(self, n_draws, seed):
        s2 = self.sigma_e2
        Linv = linalg.solve_triangular(self.L, np.eye(len(self.y)), lower=True, check_finite=False)
        trace = s2 * (len(self.y) - s2 * float(np.sum(Linv * Linv)))
        beta = _beta_draws(self, n_draws, seed)
        centre = self.y - self.X @ self.beta_mean if self.m else self.y
        resid_mean = s2 * self.solve(centre)
        resid = s2 * self.solve(self.y[:, None] - self.X @ beta) if self.m else resid_mean[:, None]
        return _dic_terms(resid, resid_mean, trace, s2)


def _dic(data, hyper, beta_prior_var, stationary, n_draws, seed):
    if len(data.y) == 0:
        return 0.0, 0.0, 0.0
    cls = _GridSystem if data.complete else _DenseSystem
    return cls(data, hyper, beta_prior_var, stationary).dic(n_draws, seed)


def dic_components(data, posterior, hyper, n_draws=DIC_DRAWS, seed=0):
    """``(dic, p_d, mean_deviance)`` with the mean deviance from posterior draws.

    Deviance is ``-2`` times the Gaussian log likelihood of ``y`` given the
    linear predictor. Its posterior mean is estimated from ``n_draws``
    coefficient draws, with the field integrated out exactly given each draw:
    conditional on ``beta`` the residual is ``sigma_e2 K^-1 (y - X beta)``
    plus field noise of known total variance. This is an unbiased,
    lower-variance form of the plain joint-draw average, and it keeps DIC
    differences between covariate sets from being swamped by sampling noise.
    """
    return _dic(data, hyper, posterior.beta_prior_var, posterior.stationary, n_draws, seed)


def dic(data, posterior, hyper, n_draws=DIC_DRAWS, seed=0):
    """Deviance information criterion (mean deviance + effective parameters)."""
    return dic_components(data, posterior, hyper, n_draws, seed)[0]


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass
class FittedModel:
    hyper: Hyperparameters
    posterior: LatentPosterior | None
    log_marginal: float
    dic: float
    p_d: float
    locations: np.ndarray
    names: list
    stationary: bool = False
    beta_prior_var: float = BETA_PRIOR_VAR
    data: ModelData | None = None
    meta: dict = field(default_factory=dict)


def default_start(data):
    """Rough starting hyperparameters from OLS residuals and site spacing."""
    y, X = data.y, data.X
    if X.shape[1] and len(y) > X.shape[1]:
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
    else:
        resid = y - y.mean() if len(y) else y
    var = float(np.var(resid)) if len(y) > 1 else 1.0
    var = max(var, 1e-6)
    d = data.distances[np.triu_indices(data.n_locations, 1)]
    d = d[d > 0]
    kappa = 1.0 / float(np.median(d)) if d.size else 1.0
    return Hyperparameters(0.5 * var, 0.5 * var, kappa, 0.5)


def fit(
    data,
    start=None,
    beta_prior_var=BETA_PRIOR_VAR,
    stationary=False,
    max_iter=400,
    xatol=1e-3,
    fatol=1e-4,
    initial_step=0.5,
    dic_seed=0,
    n_dic_draws=DIC_DRAWS,
    with_posterior=True,
):
    """Maximise the marginal likelihood over the hyperparameters.

    The search runs Nelder-Mead over ``(log sigma_e2, log sigma_f2, log kappa,
    atanh a)``. The latent posterior and DIC are evaluated at the optimum.
    """
    if data.n_locations < 2 or len(np.unique(data.month)) < 2:
        raise FitError("fitting needs at least 2 locations and 2 observed months")
    start = start or default_start(data)

    def objective(theta):
        try:
            hyper = Hyperparameters.from_unconstrained(theta)
            return -log_marginal_likelihood(data, hyper, beta_prior_var, stationary)
        except (ValidationError, NumericalError, OverflowError, ValueError):
            return math.inf

    res = nelder_mead(objective, start.to_unconstrained(), xatol, fatol, max_iter, initial_step)
    if not math.isfinite(res.fun):
        raise FitError(f"marginal likelihood is not finite at the optimum ({res.x})")
    hyper = Hyperparameters.from_unconstrained(res.x)
    post = None
    if with_posterior:
        post = latent_posterior(data, hyper, beta_prior_var, stationary)
    d, p_d, _ = _dic(data, hyper, beta_prior_var, stationary, n_dic_draws, dic_seed)
    return FittedModel(
        hyper=hyper,
        posterior=post,
        log_marginal=-res.fun,
        dic=d,
        p_d=p_d,
        locations=data.locations,
        names=list(data.names),
        stationary=stationary,
        beta_prior_var=beta_prior_var,
        data=data,
        meta={"optimizer": {"nit": res.nit, "nfev": res.nfev, "converged": res.converged}},
    )


def sample_posterior(model, n_samples=100, seed=0):
    """``n_samples`` exact joint draws of ``(beta, phi)``, one per row."""
    post = model.posterior if isinstance(model, FittedModel) else model
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((post.cov_factor.shape[1], n_samples))
    return (post.mean[:, None] + post.cov_factor @ eps).T


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

class CurvePredictor:
    """Kriging of sampled field values onto target locations.

    Under the separable covariance the conditional mean of the field at a
    target given all training nodes reduces, month by month, to the spatial
    kriging weights ``M(target, train) M(train, train)^-1``.
    """

    def __init__(self, model, targets, design_at_targets):
        self.model = model
        self.targets = np.asarray(targets, dtype=float).reshape(-1, 2)
        T = len(self.targets)
        self.X = np.asarray(design_at_targets, dtype=float).reshape(12 * T, -1)
        if self.X.shape[1] != model.posterior.n_coef:
            raise ValidationError(
                f"target design has {self.X.shape[1]} columns, model has {model.posterior.n_coef}"
            )
        kappa = model.hyper.kappa
        train = np.asarray(model.locations, dtype=float)
        d_tt = haversine_km(train)
        d_Tt = haversine_km(self.targets, train)
        M_tt = matern_cov(d_tt, 1.0, kappa)
        M_Tt = matern_cov(d_Tt, 1.0, kappa)
        factor = _cholesky_jitter(M_tt, what="training Matérn matrix")
        W = linalg.cho_solve((factor, True), M_Tt.T, check_finite=False).T
        hit = d_Tt <= 1e-9
        rows = np.flatnonzero(hit.any(axis=1))
        if rows.size:
            W[rows] = 0.0
            W[rows, hit[rows].argmax(axis=1)] = 1.0
        self.weights = W

    def log_values(self, draw):
        """Unnormalised log proportions, shape ``(T, 12)``."""
        m = self.model.posterior.n_coef
        n = len(self.model.locations)
        draw = np.asarray(draw, dtype=float)
        phi = draw[m:].reshape(12, n) @ self.weights.T
        T = len(self.targets)
        lin = (self.X @ draw[:m]).reshape(12, T)
        return (lin + phi).T

    def __call__(self, draw):
        logp = self.log_values(draw)
        logp = logp - logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        return p / p.sum(axis=1, keepdims=True)


def predict_curves(model, targets, design_at_targets, draw):
    """Monthly proportion curves (rows sum to 1) at ``targets`` for one latent draw."""
    return CurvePredictor(model, targets, design_at_targets)(draw)


# ---------------------------------------------------------------------------
# Archive
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write a ``SEASMAP-MODEL v1`` archive: header, JSON metadata, raw float64 arrays."""
    arrays = {
        "locations": model.locations,
        "posterior_mean": model.posterior.mean,
        "cov_factor": model.posterior.cov_factor,
    }
    if model.data is not None:
        arrays.update(
            site=model.data.site.astype(float),
            month=model.data.month.astype(float),
            y=model.data.y,
            X=model.data.X,
        )
    layout = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        arrays[name] = arr
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    meta = {
        "hyper": model.hyper.as_dict(),
        "nu": model.hyper.nu,
        "log_marginal": model.log_marginal,
        "dic": model.dic,
        "p_d": model.p_d,
        "names": model.names,
        "n_coef": model.posterior.n_coef,
        "stationary_ar1": model.stationary,
        "beta_prior_var": model.beta_prior_var,
        "meta": model.meta,
        "arrays": layout,
    }
    with open(path, "wb") as fh:
        fh.write((ARCHIVE_HEADER + "\n").encode())
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        for arr in arrays.values():
            fh.write(arr.tobytes())


def load_model(path):
    """Inverse of :func:`save_model`."""
    with open(Path(path), "rb") as fh:
        header = fh.readline().decode(errors="replace").strip()
        if header != ARCHIVE_HEADER:
            raise ValidationError(f"{path}: not a {ARCHIVE_HEADER} archive (header {header!r})")
        meta = json.loads(fh.readline())
        blob = fh.read()
    arrays = {}
    for entry in meta["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(float)
    hyper = Hyperparameters(**meta["hyper"])
    locations = arrays["locations"]
    data = None
    if "y" in arrays:
        data = ModelData(
            locations,
            arrays["site"].astype(int),
            arrays["month"].astype(int),
            arrays["y"],
            arrays["X"],
            list(meta["names"]),
        )
    post = LatentPosterior(
        arrays["posterior_mean"], arrays["cov_factor"], meta["n_coef"], len(locations),
        data.X if data is not None else None,
        meta["beta_prior_var"],
        meta["stationary_ar1"],
    )
    return FittedModel(
        hyper=hyper,
        posterior=post,
        log_marginal=meta["log_marginal"],
        dic=meta["dic"],
        p_d=meta["p_d"],
        locations=locations,
        names=list(meta["names"]),
        stationary=meta["stationary_ar1"],
        beta_prior_var=meta["beta_prior_var"],
        data=data,
        meta=meta["meta"],
    )
