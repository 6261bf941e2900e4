"""Deep autoencoding Gaussian mixture model for energy-based uncertainty scores.

An autoencoder compresses standardized feature rows to a 2-d code; the code,
the relative reconstruction distance and the cosine similarity form a 4-d
latent ``z``. An estimation network assigns soft mixture memberships from
which a Gaussian mixture is fitted in closed form. The sample energy
(negative log mixture density) is the uncertainty score.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._io import dump_json, load_json

log = logging.getLogger(__name__)

EPS_COV = 1e-6
STARVED = 1e-8
MODEL_VERSION = 1
MIN_ROWS = 500


class DagmmError(ArithmeticError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")


@dataclass(frozen=True, eq=False)
class GmmStats:
    phi: np.ndarray     # (K,)
    mu: np.ndarray      # (K, D)
    cov: np.ndarray     # (K, D, D), epsilon already on the diagonal

    @property
    def n_components(self) -> int:
        return len(self.phi)


@dataclass(frozen=True, eq=False)
class EnergyScore:
    value: np.ndarray           # (N,) nats
    responsibilities: np.ndarray  # (N, K) posterior component memberships


# -- plain tanh MLP with linear output --------------------------------------------------

def init_mlp(sizes, rng) -> list:
    layers = []
    for m, n in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (m + n))
        layers.append((rng.uniform(-lim, lim, size=(m, n)), np.zeros(n)))
    return layers


def mlp_forward(layers, X):
    Hs = [X]
    H = X
    for i, (W, b) in enumerate(layers):
        A = H @ W + b
        H = np.tanh(A) if i < len(layers) - 1 else A
        Hs.append(H)
    return H, Hs


def mlp_backward(layers, Hs, g_out):
    grads = [None] * len(layers)
    g = g_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (Hs[i].T @ g, g.sum(axis=0))
        g = g @ W.T
        if i > 0:
            g = g * (1.0 - Hs[i] * Hs[i])
    return grads, g


def _softmax(o):
    o = o - o.max(axis=1, keepdims=True)
    e = np.exp(o)
    return e / e.sum(axis=1, keepdims=True)


# -- latent construction ----------------------------------------------------------------

def recon_features(x, x_hat):
    """Relative Euclidean distance and cosine similarity per row."""
    nx = np.linalg.norm(x, axis=1)
    nh = np.linalg.norm(x_hat, axis=1)
    dist = np.linalg.norm(x - x_hat, axis=1)
    safe = nx > 0
    rel = np.where(safe, dist / np.where(safe, nx, 1.0), dist)
    ok = safe & (nh > 0)
    cos = np.where(ok, np.sum(x * x_hat, axis=1) / np.where(ok, nx * nh, 1.0), 0.0)
    return rel, cos


def _recon_features_grad(x, x_hat, g_rel, g_cos):
    nx = np.linalg.norm(x, axis=1)
    nh = np.linalg.norm(x_hat, axis=1)
    r = x - x_hat
    dist = np.linalg.norm(r, axis=1)
    safe = nx > 0
    denom = np.where(safe, nx, 1.0) * np.where(dist > 0, dist, 1.0)
    g = -(g_rel * np.where(dist > 0, 1.0 / denom, 0.0))[:, None] * r
    ok = safe & (nh > 0)
    nx1 = np.where(ok, nx, 1.0)
    nh1 = np.where(ok, nh, 1.0)
    cos = np.sum(x * x_hat, axis=1) / (nx1 * nh1)
    gc = x / (nx1 * nh1)[:, None] - (cos / nh1**2)[:, None] * x_hat
    return g + np.where(ok, g_cos, 0.0)[:, None] * gc


# -- mixture statistics and energy ----------------------------------------------------

def gmm_update(z, gamma, eps: float = EPS_COV) -> GmmStats:
    """Closed-form weighted moments; starved components fall back to the batch mean with unit covariance."""
    z = np.asarray(z, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    N, D = z.shape
    K = gamma.shape[1]
    if N < K:
        raise ValueError(f"batch of {N} rows is smaller than K={K}")
    S = gamma.sum(axis=0)
    phi = S / N
    mu = np.empty((K, D))
    cov = np.empty((K, D, D))
    for k in range(K):
        if S[k] < STARVED:
            warnings.warn(f"mixture component {k} starved; reset to batch mean", RuntimeWarning, stacklevel=2)
            mu[k] = z.mean(axis=0)
            cov[k] = np.eye(D)
            continue
        mu[k] = gamma[:, k] @ z / S[k]
        d = z - mu[k]
        cov[k] = (gamma[:, k, None] * d).T @ d / S[k] + eps * np.eye(D)
    return GmmStats(phi, mu, cov)


def _component_terms(stats: GmmStats, z):
    """Per-row, per-component log weight + log density, and the cached Cholesky pieces."""
    N, D = z.shape
    K = stats.n_components
    logp = np.empty((N, K))
    chols = []
    for k in range(K):
        try:
            L = np.linalg.cholesky(stats.cov[k])
        except np.linalg.LinAlgError as exc:
            raise DagmmError(f"covariance of component {k} is not positive definite") from exc
        d = z - stats.mu[k]
        sol = cho_solve((L, True), d.T).T
        maha = np.sum(d * sol, axis=1)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        with np.errstate(divide="ignore"):
            logphi = math.log(stats.phi[k]) if stats.phi[k] > 0 else -np.inf
        logp[:, k] = logphi - 0.5 * maha - 0.5 * (logdet + D * math.log(2 * math.pi))
        chols.append((L, d, sol))
    return logp, chols


def energy(stats: GmmStats, z) -> EnergyScore:
    """E(z) = -log sum_k phi_k N(z | mu_k, Sigma_k), stabilized by log-sum-exp."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    logp, _ = _component_terms(stats, z)
    E = -logsumexp(logp, axis=1)
    w = np.exp(logp + E[:, None])
    if not np.all(np.isfinite(E)):
        raise DagmmError("non-finite energy")
    return EnergyScore(E, w)


# -- model and loss -------------------------------------------------------------------

def init_model(n_in: int, seed: int, code: int = 2, hidden: int = 8, est_hidden: int = 10, K: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    return {"enc": init_mlp([n_in, hidden, code], rng),
            "dec": init_mlp([code, hidden, n_in], rng),
            "est": init_mlp([code + 2, est_hidden, K], rng)}


def build_z(model: dict, X):
    code, enc_H = mlp_forward(model["enc"], X)
    x_hat, dec_H = mlp_forward(model["dec"], code)
    rel, cos = recon_features(X, x_hat)
    z = np.column_stack([code, rel, cos])
    return z, {"code": code, "x_hat": x_hat, "enc_H": enc_H, "dec_H": dec_H}


def dagmm_loss(model: dict, X, lambda1=0.1, lambda2=0.005, with_grad=True):
    """Returns (total, recon, mean energy, covariance penalty, grads, stats)."""
    N, D_in = X.shape
    z, zc = build_z(model, X)
    o, est_H = mlp_forward(model["est"], z)
    gamma = _softmax(o)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        stats = gmm_update(z, gamma)
    starved = gamma.sum(axis=0) < STARVED
    if caught:
        log.warning("%s", caught[0].message)
    logp, chols = _component_terms(stats, z)
    E = -logsumexp(logp, axis=1)
    r = zc["x_hat"] - X
    recon = float(np.mean(r * r))
    diag = np.array([np.diag(c) for c in stats.cov])
    pen = float(np.sum(1.0 / diag))
    total = recon + lambda1 * float(np.mean(E)) + lambda2 * pen
    if not with_grad:
        return total, recon, float(np.mean(E)), pen, None, stats
    K, Dz = stats.mu.shape
    w = np.exp(logp + E[:, None])
    a = -(lambda1 / N) * w                         # dL/dlogp
    g_z = np.zeros_like(z)
    g_gamma = np.zeros_like(gamma)
    S = gamma.sum(axis=0)
    for k in range(K):
        if starved[k]:
            continue
        L, d, sol = chols[k]
        P = cho_solve((L, True), np.eye(Dz))
        ak = a[:, k]
        g_mu = sol.T @ ak
        g_z -= ak[:, None] * sol
        G = 0.5 * (sol.T * ak) @ sol - 0.5 * ak.sum() * P
        G = G - lambda2 * np.diag(1.0 / np.diag(stats.cov[k]) ** 2)
        g_phi = ak.sum() / stats.phi[k]
        M = stats.cov[k] - EPS_COV * np.eye(Dz)
        quad = np.sum((d @ G) * d, axis=1)
        g_gamma[:, k] += (quad - np.sum(G * M)) / S[k]
        g_z += 2.0 * (gamma[:, k] / S[k])[:, None] * (d @ G)
        g_gamma[:, k] += (d @ g_mu) / S[k]
        g_z += (gamma[:, k] / S[k])[:, None] * g_mu
        g_gamma[:, k] += g_phi / N
    g_o = gamma * (g_gamma - np.sum(gamma * g_gamma, axis=1, keepdims=True))
    g_est, g_z_in = mlp_backward(model["est"], est_H, g_o)
    g_z = g_z + g_z_in
    g_xhat = 2.0 * r / (N * D_in) + _recon_features_grad(X, zc["x_hat"], g_z[:, 2], g_z[:, 3])
    g_dec, g_code = mlp_backward(model["dec"], zc["dec_H"], g_xhat)
    g_enc, _ = mlp_backward(model["enc"], zc["enc_H"], g_code + g_z[:, :2])
    return total, recon, float(np.mean(E)), pen, {"enc": g_enc, "dec": g_dec, "est": g_est}, stats


def _adam_init(model):
    return {k: [(np.zeros_like(W), np.zeros_like(b)) for W, b in v] for k, v in model.items()}


class DagmmScorer(BaseEstimator):
    """Fit on standardized feature rows; ``score_samples`` returns per-row energy."""

    def __init__(self, n_components=3, code_size=2, hidden=8, est_hidden=10, lambda1=0.1, lambda2=0.005,
                 learning_rate=1e-3, batch_size=128, epochs=200, seed=42):
        self.n_components = n_components
        self.code_size = code_size
        self.hidden = hidden
        self.est_hidden = est_hidden
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, Z, y=None, min_rows: int = MIN_ROWS):
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[0] < min_rows:
            raise ValueError(f"need at least {min_rows} training rows, got {Z.shape[0]}")
        self.n_features_in_ = Z.shape[1]
        model = init_model(Z.shape[1], self.seed, self.code_size, self.hidden, self.est_hidden, self.n_components)
        m, v = _adam_init(model), _adam_init(model)
        b1, b2, eps, t = 0.9, 0.999, 1e-8, 0
        rng = np.random.default_rng(self.seed)
        N = Z.shape[0]
        hist = []
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(N)
            sums = np.zeros(4)
            for s in range(0, N, self.batch_size):
                idx = order[s:s + self.batch_size]
                if len(idx) < self.n_components:
                    continue
                total, recon, e_mean, pen, grads, _ = dagmm_loss(model, Z[idx], self.lambda1, self.lambda2)
                if not math.isfinite(total):
                    raise DagmmError("loss became non-finite", epoch)
                t += 1
                c1, c2 = 1.0 - b1**t, 1.0 - b2**t
                for part in model:
                    for (W, b), (gW, gb), (mW, mb), (vW, vb) in zip(model[part], grads[part], m[part], v[part]):
                        for p, g, mm, vv in ((W, gW, mW, vW), (b, gb, mb, vb)):
                            mm *= b1
                            mm += (1 - b1) * g
                            vv *= b2
                            vv += (1 - b2) * g * g
                            p -= self.learning_rate * (mm / c1) / (np.sqrt(vv / c2) + eps)
                sums += len(idx) * np.array([total, recon, e_mean, pen])
            hist.append(sums / N)
            if epoch == 1 or epoch % 50 == 0 or epoch == self.epochs:
                log.info("epoch %d: loss %.4f (recon %.4f, energy %.4f, cov %.2f)", epoch, *hist[-1])
        self.model_ = model
        self.loss_log_ = np.array(hist)
        z, _ = build_z(model, Z)
        gamma = _softmax(mlp_forward(model["est"], z)[0])
        self.stats_ = gmm_update(z, gamma)
        self.train_energy_ = np.sort(energy(self.stats_, z).value)
        return self

    def latent(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        return build_z(self.model_, self._check(Z))[0]

    def _check(self, Z):
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {Z.shape[1]}")
        return Z

    def score_samples(self, Z) -> np.ndarray:
        """Energy per row (nats); higher means less typical."""
        check_is_fitted(self, "model_")
        z, _ = build_z(self.model_, self._check(Z))
        return energy(self.stats_, z).value

    def percentile(self, energies) -> np.ndarray:
        """Percentile rank (0-100) of energies within the training-set energy distribution."""
        check_is_fitted(self, "train_energy_")
        e = np.asarray(energies, dtype=float)
        return 100.0 * np.searchsorted(self.train_energy_, e, side="right") / len(self.train_energy_)

    def to_dict(self) -> dict:
        check_is_fitted(self, "model_")
        return {
            "version": MODEL_VERSION, "kind": "uq-dagmm", "params": self.get_params(),
            "n_features_in": self.n_features_in_,
            "model": {k: [{"W": W.tolist(), "b": b.tolist()} for W, b in v] for k, v in self.model_.items()},
            "gmm": {"phi": self.stats_.phi.tolist(), "mu": self.stats_.mu.tolist(), "cov": self.stats_.cov.tolist()},
            "train_energy": self.train_energy_.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DagmmScorer":
        if data.get("kind") != "uq-dagmm" or data.get("version") != MODEL_VERSION:
            raise ValueError("not a version-1 uq-dagmm model file")
        obj = cls(**data["params"])
        obj.n_features_in_ = data["n_features_in"]
        obj.model_ = {k: [(np.array(L["W"], dtype=float), np.array(L["b"], dtype=float)) for L in v]
                      for k, v in data["model"].items()}
        g = data["gmm"]
        obj.stats_ = GmmStats(np.array(g["phi"]), np.array(g["mu"]), np.array(g["cov"]))
        obj.train_energy_ = np.array(data["train_energy"])
        return obj

    def save(self, path, comments=(), extra: dict | None = None) -> None:
        data = self.to_dict()
        if extra:
            data["meta"] = extra
        dump_json(data, path, comments)

    @classmethod
    def load(cls, path) -> "DagmmScorer":
        return cls.from_dict(load_json(path))


def uncertainty_csv(cell_id, cycle, energies, percentiles, comments=()) -> str:
    lines = [f"# {c}" for c in comments] + ["cell_id,cycle,energy,energy_percentile"]
    lines.extend(f"{c},{int(n)},{e:.8f},{p:.4f}" for c, n, e, p in zip(cell_id, cycle, energies, percentiles))
    return "\n".join(lines) + "\n"
