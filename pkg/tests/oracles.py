"""Independent reference computations used by several test modules.

Nothing here calls the package's linear algebra: covariances are built
entry by entry and posteriors come from the joint precision matrix.
"""

import math

import numpy as np
from scipy import special

R_EARTH = 6371.0088


def great_circle_km(p, q):
    lon1, lat1, lon2, lat2 = map(math.radians, (p[0], p[1], q[0], q[1]))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * R_EARTH * math.asin(math.sqrt(min(h, 1.0)))


def matern(h, sigma_f2, kappa):
    if h == 0:
        return sigma_f2
    x = kappa * h
    return sigma_f2 * x * float(special.k1(x))


def ar1_entry(i, j, a, stationary=False):
    """Month covariance by unrolling the recursion phi_i = a phi_{i-1} + xi_i."""
    if stationary:
        return a ** abs(i - j) / (1 - a * a)
    # phi_i = sum_{k=1..i} a^(i-k) xi_k, so Cov = sum_{k<=min} a^(i-k) a^(j-k)
    return math.fsum(a ** (i - k) * a ** (j - k) for k in range(1, min(i, j) + 1))


def field_covariance(locations, sigma_f2, kappa, a, stationary=False):
    n = len(locations)
    C = np.empty((12 * n, 12 * n))
    for i in range(12):
        for j in range(n):
            for i2 in range(12):
                for j2 in range(n):
                    h = great_circle_km(locations[j], locations[j2])
                    C[i * n + j, i2 * n + j2] = ar1_entry(i + 1, i2 + 1, a, stationary) * matern(
                        h, sigma_f2, kappa
                    )
    return C


def dense_posterior(locations, site, month, y, X, sigma_e2, sigma_f2, kappa, a, beta_var, stationary=False):
    """Mean and covariance of (beta, phi) from the joint precision (normal equations)."""
    n = len(locations)
    m = X.shape[1]
    C = field_covariance(locations, sigma_f2, kappa, a, stationary)
    prior = np.zeros((m + 12 * n, m + 12 * n))
    prior[:m, :m] = beta_var * np.eye(m)
    prior[m:, m:] = C
    H = np.zeros((len(y), m + 12 * n))
    H[:, :m] = X
    for r, (s, mo) in enumerate(zip(site, month)):
        H[r, m + (mo - 1) * n + s] = 1.0
    Q = np.linalg.inv(prior) + H.T @ H / sigma_e2
    cov = np.linalg.inv(Q)
    mean = cov @ (H.T @ y) / sigma_e2
    return mean, cov


def log_marginal(y, X, locations, site, month, sigma_e2, sigma_f2, kappa, a, beta_var, stationary=False):
    n = len(locations)
    C = field_covariance(locations, sigma_f2, kappa, a, stationary)
    idx = [(mo - 1) * n + s for s, mo in zip(site, month)]
    K = beta_var * X @ X.T + C[np.ix_(idx, idx)] + sigma_e2 * np.eye(len(y))
    sign, logdet = np.linalg.slogdet(K)
    return -0.5 * (y @ np.linalg.solve(K, y) + logdet + len(y) * math.log(2 * math.pi))
