"""Gaussian-process surrogate (Matern 5/2) and expected improvement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import erfc

LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.4, 0.8)
SIGNAL_VAR = 1.0
NUGGET = 1e-6
NUGGET_MAX = 1e-2


class GpFitError(np.linalg.LinAlgError):
    pass


def matern52(A: np.ndarray, B: np.ndarray, lengthscale: float, signal_var: float = SIGNAL_VAR) -> np.ndarray:
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    r = np.sqrt(np.maximum(d2, 0.0)) / lengthscale
    s5r = math.sqrt(5.0) * r
    return signal_var * (1.0 + s5r + (5.0 / 3.0) * r * r) * np.exp(-s5r)


@dataclass
class GpSurrogate:
    """GP posterior over the unit hypercube on standardized targets."""

    X: np.ndarray
    y: np.ndarray
    lengthscale: float
    signal_var: float
    noise_var: float
    chol: np.ndarray
    alpha: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0
    log_marginal_likelihood: float = float("nan")

    @classmethod
    def from_data(cls, X, y_std, lengthscale, signal_var=SIGNAL_VAR, noise_var=NUGGET,
                  y_mean=0.0, y_scale=1.0) -> "GpSurrogate":
        """Condition on already-standardized targets with fixed hyperparameters."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y_std, dtype=float).ravel()
        K = matern52(X, X, lengthscale, signal_var) + noise_var * np.eye(len(y))
        L = np.linalg.cholesky(K)
        alpha = cho_solve((L, True), y)
        lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * math.log(2 * math.pi)
        return cls(X, y, lengthscale, signal_var, noise_var, L, alpha, y_mean, y_scale, lml)

    def standardize(self, value):
        return (np.asarray(value, dtype=float) - self.y_mean) / self.y_std

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance (standardized units) at rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ks = matern52(x, self.X, self.lengthscale, self.signal_var)
        mean = ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = self.signal_var - np.sum(v * v, axis=0)
        # round-off can leave tiny negative values at training inputs
        return mean, np.maximum(var, 0.0)


def gp_fit(X, y, grid=LENGTHSCALE_GRID) -> GpSurrogate:
    """Standardize ``y`` and pick the lengthscale maximizing the log marginal likelihood."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 1 or X.shape[0] != len(y):
        raise ValueError("gp_fit needs matching, non-empty X and y")
    mu = float(y.mean())
    sd = float(y.std())
    if not sd > 0:
        sd = 1.0
    ys = (y - mu) / sd
    best = None
    for ell in grid:
        nugget = NUGGET
        while True:
            try:
                g = GpSurrogate.from_data(X, ys, ell, SIGNAL_VAR, nugget, mu, sd)
                break
            except np.linalg.LinAlgError:
                nugget *= 10.0
                if nugget > NUGGET_MAX * (1 + 1e-9):
                    raise GpFitError(f"kernel matrix not positive definite (lengthscale {ell}, nugget {NUGGET_MAX})")
        if best is None or g.log_marginal_likelihood > best.log_marginal_likelihood:
            best = g
    return best


def gp_predict(g: GpSurrogate, x):
    return g.predict(x)


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def _norm_cdf(z):
    return 0.5 * erfc(-z / math.sqrt(2.0))


def expected_improvement(mean, variance, best):
    """Expected improvement below ``best`` (minimization)."""
    scalar = np.ndim(mean) == 0 and np.ndim(variance) == 0
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    variance = np.atleast_1d(np.asarray(variance, dtype=float))
    if np.any(variance < 0):
        raise ValueError("variance must be non-negative")
    mean, variance = np.broadcast_arrays(mean, variance)
    sigma = np.sqrt(variance)
    delta = best - mean
    out = np.maximum(delta, 0.0)
    pos = sigma > 0
    z = delta[pos] / sigma[pos]
    out[pos] = np.maximum(delta[pos] * _norm_cdf(z) + sigma[pos] * _norm_pdf(z), 0.0)
    return float(out[0]) if scalar else out


def lhs_init(dim: int, n0: int, seed: int) -> np.ndarray:
    """Latin hypercube design in [0, 1]^dim: one point per stratum per dimension."""
    rng = np.random.default_rng(seed)
    u = rng.random((n0, dim))
    strata = np.column_stack([rng.permutation(n0) for _ in range(dim)])
    return (strata + u) / n0


N_UNIFORM = 4096
N_LOCAL = 256
LOCAL_SIGMA = 0.05


def candidate_set(dim: int, incumbent, seed: int) -> np.ndarray:
    """Uniform candidates, then the incumbent itself, then clipped Gaussian perturbations of it."""
    rng = np.random.default_rng(seed)
    uni = rng.random((N_UNIFORM, dim))
    inc = np.asarray(incumbent, dtype=float).reshape(1, dim)
    local = np.clip(inc + LOCAL_SIGMA * rng.standard_normal((N_LOCAL, dim)), 0.0, 1.0)
    return np.vstack([uni, inc, local])


def propose_next(g: GpSurrogate, best, incumbent, seed: int) -> np.ndarray:
    """EI maximizer over the seeded candidate set; ties go to the lowest index.

    ``best`` is in the surrogate's standardized units.
    """
    cands = candidate_set(g.X.shape[1], incumbent, seed)
    mean, var = g.predict(cands)
    ei = expected_improvement(mean, var, best)
    return cands[int(np.argmax(ei))]
