"""Physics-informed MLP for state-of-health regression.

The network maps standardized per-cycle features to SOH through tanh hidden
layers and a sigmoid output squashed to [0.5, 1.05]. Training minimizes

    data + lambda_mono * mono + lambda_phys * phys

where ``mono`` penalizes a positive slope along cycle_norm and ``phys`` is the
residual of the square-root + linear fade law at collocation points. Input
derivatives are obtained by forward tangent propagation and their weight
gradients by differentiating the tangent pass in reverse.
"""
from __future__ import annotations

import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._io import dump_json, load_json
from .dataio import CYCLE_NORM, FEATURE_NAMES, FeatureNormalizer, family_of

log = logging.getLogger(__name__)

OUT_LO = 0.5
OUT_SPAN = 0.55
MODEL_VERSION = 1
MIN_ROWS = 100


class TrainingError(ArithmeticError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")


class PinnNumericalError(ArithmeticError):
    pass


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def init_layers(sizes, seed: int, zero_output: bool = False) -> list:
    """Glorot-uniform weights, zero biases; list of (W, b) with W shaped (fan_in, fan_out)."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = math.sqrt(6.0 / (m + n))
        W = rng.uniform(-lim, lim, size=(m, n))
        if zero_output and i == len(sizes) - 2:
            W[:] = 0.0
        layers.append((W, np.zeros(n)))
    return layers


def forward(layers, X, v=None) -> dict:
    """Forward pass; with direction ``v`` also the directional input derivative ``df``."""
    H = np.asarray(X, dtype=float)
    dH = None if v is None else np.asarray(v, dtype=float)[None, :]
    cache = {"H": [H], "dH": [dH], "v": v}
    for W, b in layers[:-1]:
        H = np.tanh(H @ W + b)
        cache["H"].append(H)
        if v is not None:
            dA = dH @ W
            cache.setdefault("dA", []).append(dA)
            dH = (1.0 - H * H) * dA
            cache["dH"].append(dH)
    W, b = layers[-1]
    S = _sigmoid(H @ W + b)
    cache["S"] = S
    cache["f"] = OUT_LO + OUT_SPAN * S[:, 0]
    if v is not None:
        dA = dH @ W
        cache["dA_out"] = dA
        cache["df"] = OUT_SPAN * (S * (1.0 - S) * dA)[:, 0]
    return cache


def backward(layers, cache, gf=None, gd=None) -> list:
    """Weight gradients given adjoints ``gf`` (per-row dL/df) and ``gd`` (per-row dL/d(df))."""
    S = cache["S"]
    s1 = S * (1.0 - S)
    B = S.shape[0]
    A_bar = np.zeros((B, 1)) if gf is None else OUT_SPAN * s1 * np.asarray(gf)[:, None]
    D_bar = None
    if gd is not None:
        gd = np.asarray(gd)[:, None]
        A_bar = A_bar + OUT_SPAN * s1 * (1.0 - 2.0 * S) * cache["dA_out"] * gd
        D_bar = OUT_SPAN * s1 * gd
    grads = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        H_in = cache["H"][li]
        gW = H_in.T @ A_bar
        if D_bar is not None:
            dH_in = cache["dH"][li]
            gW = gW + (np.outer(dH_in[0], D_bar.sum(axis=0)) if li == 0 else dH_in.T @ D_bar)
        grads[li] = (gW, A_bar.sum(axis=0))
        if li == 0:
            break
        H_bar = A_bar @ W.T
        t = 1.0 - H_in * H_in
        if D_bar is None:
            A_bar = H_bar * t
        else:
            Dh_bar = D_bar @ W.T
            A_bar = H_bar * t - 2.0 * Dh_bar * cache["dA"][li - 1] * H_in * t
            D_bar = Dh_bar * t
    return grads


def fit_fade(cycles, soh, Q_nom: float = 2.0) -> tuple[float, float]:
    """Least-squares (b1, b2) in Q_nom*(1 - soh) = b1*sqrt(n) + b2*n."""
    n = np.asarray(cycles, dtype=float)
    A = np.column_stack([np.sqrt(n), n])
    coef, *_ = np.linalg.lstsq(A, Q_nom * (1.0 - np.asarray(soh, dtype=float)), rcond=None)
    return float(coef[0]), float(coef[1])


def pinn_loss(layers, X, y, colloc=None, lambda_mono=1.0, lambda_phys=0.1, fade=(0.0, 0.0),
              Q_nom=2.0, with_grad=True):
    """Composite loss and (optionally) gradients.

    ``colloc`` is ``(Xc, v, max_cycle, cycle_norm)``: standardized collocation rows,
    the tangent direction whose derivative equals d f / d cycle_norm, per-row
    cycle counts and the raw cycle_norm values. Returns (total, data, mono, phys, grads).
    """
    c = forward(layers, X)
    r = c["f"] - y
    data = float(np.mean(r * r))
    grads = backward(layers, c, gf=2.0 * r / len(y)) if with_grad else None
    mono = phys = 0.0
    if colloc is not None and (lambda_mono > 0 or lambda_phys > 0):
        Xc, v, max_cycle, cn = colloc
        cc = forward(layers, Xc, v)
        d = cc["df"]
        pos = np.maximum(d, 0.0)
        mono = float(np.mean(pos * pos))
        n = np.maximum(cn * max_cycle, 1.0)
        res = d / max_cycle + (fade[0] / (2.0 * np.sqrt(n)) + fade[1]) / Q_nom
        phys = float(np.mean(res * res))
        if with_grad:
            M = len(d)
            gd = lambda_mono * 2.0 * pos / M + lambda_phys * 2.0 * res / (M * max_cycle)
            gc = backward(layers, cc, gd=gd)
            grads = [(gW + hW, gb + hb) for (gW, gb), (hW, hb) in zip(grads, gc)]
    total = data + lambda_mono * mono + lambda_phys * phys
    return total, data, mono, phys, grads


class _Adam:
    def __init__(self, layers, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
        self.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
        self.t = 0

    def step(self, layers, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (W, b), (gW, gb), (mW, mb), (vW, vb) in zip(layers, grads, self.m, self.v):
            for p, g, m, s in ((W, gW, mW, vW), (b, gb, mb, vb)):
                m *= self.b1
                m += (1.0 - self.b1) * g
                s *= self.b2
                s += (1.0 - self.b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)


def mape(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    return float(100.0 * np.mean(np.abs(np.asarray(y_hat, dtype=float) - y) / np.abs(y)))


def grouped_mape(keys, y, y_hat) -> dict:
    keys = np.asarray(keys)
    return {k: mape(y[keys == k], y_hat[keys == k]) for k in sorted(set(keys.tolist()))}


def track_mape(cell_ids, y, y_hat) -> dict:
    return grouped_mape(cell_ids, np.asarray(y, float), np.asarray(y_hat, float))


def family_mape(cell_ids, y, y_hat) -> dict:
    return grouped_mape([family_of(c) for c in cell_ids], np.asarray(y, float), np.asarray(y_hat, float))


class SohPinnRegressor(RegressorMixin, BaseEstimator):
    """Physics-informed SOH regressor on raw per-cycle feature rows.

    ``fit`` standardizes with statistics of the rows it is given. Set
    ``cycle_index=None`` to train a plain MLP (no physics terms).
    """

    def __init__(self, hidden_sizes=(64, 64), lambda_mono=1.0, lambda_phys=0.1, n_colloc=64,
                 learning_rate=1e-3, batch_size=64, epochs=300, seed=42, Q_nom=2.0,
                 cycle_index=CYCLE_NORM, zero_output=False):
        self.hidden_sizes = hidden_sizes
        self.lambda_mono = lambda_mono
        self.lambda_phys = lambda_phys
        self.n_colloc = n_colloc
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.Q_nom = Q_nom
        self.cycle_index = cycle_index
        self.zero_output = zero_output

    def _check_config(self):
        if self.lambda_mono < 0 or self.lambda_phys < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_colloc < 1:
            raise ValueError("n_colloc must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def _tangent(self):
        """Direction in standardized space equal to d/d cycle_norm, or None."""
        if self.cycle_index is None:
            return None
        norm = self.normalizer_
        pos = np.flatnonzero(norm.keep_ == self.cycle_index)
        if len(pos) == 0:
            return None
        v = np.zeros(len(norm.keep_))
        v[pos[0]] = 1.0 / norm.scale_[self.cycle_index]
        return v

    def fit(self, X, y, max_cycle=300):
        self._check_config()
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=float).ravel()
        if len(y) != X.shape[0]:
            raise ValueError("X and y have different row counts")
        if X.shape[0] < MIN_ROWS:
            raise ValueError(f"need at least {MIN_ROWS} training rows, got {X.shape[0]}")
        max_cycle = np.broadcast_to(np.asarray(max_cycle, dtype=float), y.shape).copy()
        names = FEATURE_NAMES if X.shape[1] == len(FEATURE_NAMES) else tuple(f"x{i}" for i in range(X.shape[1]))
        self.normalizer_ = FeatureNormalizer(names).fit(X)
        Z = self.normalizer_.transform(X)
        self.n_features_in_ = X.shape[1]
        v = self._tangent()
        physics = v is not None and (self.lambda_mono > 0 or self.lambda_phys > 0)
        if physics:
            n = X[:, self.cycle_index] * max_cycle
            self.fade_ = fit_fade(n, y, self.Q_nom)
        else:
            self.fade_ = (0.0, 0.0)
        sizes = [Z.shape[1], *self.hidden_sizes, 1]
        self.layers_ = init_layers(sizes, self.seed, self.zero_output)
        opt = _Adam(self.layers_, self.learning_rate)
        rng = np.random.default_rng(self.seed)
        N = len(y)
        log_rows = []
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(N)
            sums = np.zeros(4)
            for s in range(0, N, self.batch_size):
                idx = order[s:s + self.batch_size]
                colloc = None
                if physics:
                    ci = rng.integers(0, N, size=self.n_colloc)
                    u = rng.random(self.n_colloc)
                    Xc = Z[ci].copy()
                    k = np.flatnonzero(self.normalizer_.keep_ == self.cycle_index)[0]
                    Xc[:, k] = (u - self.normalizer_.mean_[self.cycle_index]) / self.normalizer_.scale_[self.cycle_index]
                    colloc = (Xc, v, max_cycle[ci], u)
                total, data, mono, phys, grads = pinn_loss(
                    self.layers_, Z[idx], y[idx], colloc, self.lambda_mono, self.lambda_phys,
                    self.fade_, self.Q_nom)
                if not math.isfinite(total):
                    raise TrainingError("loss became non-finite", epoch)
                opt.step(self.layers_, grads)
                sums += len(idx) * np.array([total, data, mono, phys])
            row = sums / N
            log_rows.append(row)
            if epoch == 1 or epoch % 50 == 0 or epoch == self.epochs:
                log.info("epoch %d: loss %.3e (data %.3e, mono %.3e, phys %.3e)", epoch, *row)
        for W, b in self.layers_:
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise TrainingError("weights became non-finite", self.epochs)
        self.loss_log_ = np.array(log_rows)
        return self

    def predict_standardized(self, Z) -> np.ndarray:
        check_is_fitted(self, "layers_")
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.layers_[0][0].shape[0]:
            raise ValueError(f"expected {self.layers_[0][0].shape[0]} standardized features, got shape {Z.shape}")
        f = forward(self.layers_, Z)["f"]
        if not np.all(np.isfinite(f)):
            raise PinnNumericalError("non-finite prediction")
        return f

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "layers_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.predict_standardized(self.normalizer_.transform(X))

    def score(self, X, y, sample_weight=None) -> float:
        """Negative MAPE in percent (higher is better)."""
        return -mape(y, self.predict(X))

    def to_dict(self) -> dict:
        check_is_fitted(self, "layers_")
        nz = self.normalizer_
        return {
            "version": MODEL_VERSION,
            "kind": "soh-pinn",
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "layer_sizes": [self.layers_[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers_],
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers_],
            "normalizer": {"feature_names": list(nz.feature_names), "mean": nz.mean_.tolist(),
                           "scale": nz.scale_.tolist(), "keep": nz.keep_.tolist(),
                           "dropped": list(nz.dropped_), "fingerprint": nz.fingerprint()},
            "fade": list(self.fade_),
            "n_features_in": self.n_features_in_,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SohPinnRegressor":
        if data.get("kind") != "soh-pinn" or data.get("version") != MODEL_VERSION:
            raise ValueError("not a version-1 soh-pinn model file")
        p = dict(data["params"])
        p["hidden_sizes"] = tuple(p["hidden_sizes"])
        model = cls(**p)
        nd = data["normalizer"]
        nz = FeatureNormalizer(tuple(nd["feature_names"]))
        nz.mean_ = np.array(nd["mean"])
        nz.scale_ = np.array(nd["scale"])
        nz.keep_ = np.array(nd["keep"], dtype=np.int64)
        nz.dropped_ = tuple(nd["dropped"])
        nz.n_features_in_ = len(nz.mean_)
        model.normalizer_ = nz
        model.layers_ = [(np.array(L["W"], dtype=float), np.array(L["b"], dtype=float)) for L in data["layers"]]
        model.fade_ = tuple(data["fade"])
        model.n_features_in_ = data["n_features_in"]
        return model

    def save(self, path, comments=(), extra: dict | None = None) -> None:
        data = self.to_dict()
        if extra:
            data["meta"] = extra
        dump_json(data, path, comments)

    @classmethod
    def load(cls, path) -> "SohPinnRegressor":
        return cls.from_dict(load_json(path))


def predictions_csv(cell_id, cycle, soh_pred, soh_true=None, comments=()) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append("cell_id,cycle,soh_pred" + (",soh_true" if soh_true is not None else ""))
    for i in range(len(soh_pred)):
        row = f"{cell_id[i]},{int(cycle[i])},{soh_pred[i]:.8f}"
        if soh_true is not None:
            row += f",{soh_true[i]:.8f}"
        lines.append(row)
    return "\n".join(lines) + "\n"
