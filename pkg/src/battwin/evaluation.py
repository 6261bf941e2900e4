"""Held-out evaluation: SOH error metrics and the noise-injection uncertainty experiment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .pinn import family_mape, mape

NOISE_LEVELS = (0.0, 0.1, 0.3, 0.5, 1.0)


@dataclass(frozen=True, eq=False)
class NoiseExperiment:
    sigma: np.ndarray        # per-row noise level
    abs_error: np.ndarray    # |soh_pred - soh_true|
    energy: np.ndarray

    def medians(self) -> list:
        """(sigma, median |error|, median energy) per noise level."""
        return [(float(s), float(np.median(self.abs_error[self.sigma == s])),
                 float(np.median(self.energy[self.sigma == s]))) for s in np.unique(self.sigma)]

    def spearman(self) -> float:
        return spearman(self.energy, self.abs_error)

    def to_csv(self, comments=()) -> str:
        lines = [f"# {c}" for c in comments] + ["sigma,median_abs_error,median_energy"]
        lines.extend(f"{s:g},{e:.8f},{E:.8f}" for s, e, E in self.medians())
        return "\n".join(lines) + "\n"


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(spearmanr(a, b).statistic)


def noise_experiment(regressor, scorer, Z, soh, levels=NOISE_LEVELS, seed: int = 42) -> NoiseExperiment:
    """Add N(0, sigma^2) to standardized rows at each level; record |error| and energy per row."""
    Z = np.asarray(Z, dtype=float)
    soh = np.asarray(soh, dtype=float)
    rng = np.random.default_rng(seed)
    sig, err, en = [], [], []
    for s in levels:
        Zn = Z + s * rng.standard_normal(Z.shape)
        err.append(np.abs(regressor.predict_standardized(Zn) - soh))
        en.append(scorer.score_samples(Zn))
        sig.append(np.full(len(Z), float(s)))
    return NoiseExperiment(np.concatenate(sig), np.concatenate(err), np.concatenate(en))


def soh_metrics(cell_id, soh_true, soh_pred) -> dict:
    return {"mape_overall": mape(soh_true, soh_pred),
            "mape_per_family": family_mape(cell_id, soh_true, soh_pred)}
