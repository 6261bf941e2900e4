"""Cycle aging of cell parameters and labelled synthetic fleet generation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._io import config_hash, dump_json
from .params import F, R_GAS, CellParameters
from .protocol import FAMILIES, TelemetrySink, family_schedule, run_schedule
from .sim import CellState, ParticleState, initial_state

log = logging.getLogger(__name__)

LABELS_HEADER = "cell_id,cycle,soh_true"


class EndOfLifeError(RuntimeError):
    """Capacity fade consumed the whole usable window."""


@dataclass(frozen=True)
class DegradationParams:
    beta_sqrt: float = 0.012     # Ah / sqrt(cycle)
    beta_lin: float = 0.00025    # Ah / cycle
    gamma_r: float = 0.0005      # fractional R0 growth / cycle
    Ea_age: float = 2.0e4        # J/mol
    sigma_noise: float = 0.15    # lognormal cell-to-cell spread

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and non-negative, got {v!r}")

    def scaled(self, factor: float) -> "DegradationParams":
        return DegradationParams(self.beta_sqrt * factor, self.beta_lin * factor,
                                 self.gamma_r * factor, self.Ea_age, self.sigma_noise)


@dataclass(frozen=True)
class AgedCell:
    base: CellParameters
    n: int
    soh: float
    params_at_n: CellParameters


def _aging_factor(d: DegradationParams, T_mean: float, T_ref: float) -> float:
    return math.exp(-(d.Ea_age / R_GAS) * (1.0 / T_mean - 1.0 / T_ref))


def capacity_loss(n: float, d: DegradationParams, T_mean: float, T_ref: float = 298.15) -> float:
    """Ah lost after ``n`` cycles."""
    if n < 0:
        raise ValueError(f"cycle index must be >= 0, got {n!r}")
    return d.beta_sqrt * _aging_factor(d, T_mean, T_ref) * math.sqrt(n) + d.beta_lin * n


def soh_of_cycle(n: float, d: DegradationParams, T_mean: float = 298.15, Q_nom: float = 2.0,
                 T_ref: float = 298.15) -> float:
    """State of health after ``n`` cycles: square-root (SEI-like) plus linear fade."""
    soh = 1.0 - capacity_loss(n, d, T_mean, T_ref) / Q_nom
    if soh <= 0:
        raise EndOfLifeError(f"SOH reached {soh:.4f} at cycle {n}")
    return soh


def apply_degradation(base: CellParameters, n: float, d: DegradationParams,
                      T_mean: float | None = None) -> CellParameters:
    """Parameters after ``n`` cycles: cyclable-lithium loss and resistance growth.

    Lost lithium shortens the upper end of the negative window and the
    lithiated end of the positive window by the same charge, so the
    SOC-window capacity drops by exactly the faded amount.
    """
    if n == 0:
        return base
    T_mean = base.T_ref if T_mean is None else T_mean
    dq = capacity_loss(n, d, T_mean, base.T_ref)
    xn_max = base.x_n_max - dq / base.electrode_capacity("negative")
    xp_max = base.x_p_max - dq / base.electrode_capacity("positive")
    if xn_max <= base.x_n_min or xp_max <= base.x_p_min:
        raise EndOfLifeError(f"stoichiometry window collapsed at cycle {n}")
    return base.replace(x_n_max=xn_max, x_p_max=xp_max, R0=base.R0 * (1.0 + d.gamma_r * n))


def age_cell(base: CellParameters, n: int, d: DegradationParams, T_mean: float | None = None) -> AgedCell:
    T_mean = base.T_ref if T_mean is None else T_mean
    return AgedCell(base, n, soh_of_cycle(n, d, T_mean, base.Q_nom, base.T_ref),
                    apply_degradation(base, n, d, T_mean))


def remove_lithium(state: CellState, params: CellParameters, dq_ah: float) -> CellState:
    """Take ``dq_ah`` worth of lithium out of the negative particle (uniformly)."""
    if dq_ah <= 0:
        return state
    dc = dq_ah * 3600.0 / F / (params.eps_n * params.L_n * params.A_cell)
    c = np.maximum(state.neg.c - dc, 1e-9 * params.c_max_n)
    return CellState(ParticleState(c, "negative"), state.pos, state.T, state.t, state.cumulative_throughput)


def _cell_rng(seed: int, fam_idx: int, cell_idx: int):
    return np.random.default_rng([seed, fam_idx, cell_idx])


def simulate_cell(family: str, cell_id: str, cycles: int, seed: int, fam_idx: int, cell_idx: int,
                  base: CellParameters, d: DegradationParams, dt: float = 1.0):
    """Run one aged cell through ``cycles`` protocol cycles.

    Returns the telemetry sink, the per-cycle SOH labels and the drawn aging record.
    """
    rng = _cell_rng(seed, fam_idx, cell_idx)
    factor = float(rng.lognormal(0.0, d.sigma_noise)) if d.sigma_noise > 0 else 1.0
    d_cell = d.scaled(factor)
    proto_seed = int(rng.integers(0, 2**31 - 1))
    proto_rng = np.random.default_rng(proto_seed)
    schedule = family_schedule(family)
    sink = TelemetrySink(cell_id)
    state = initial_state(base, soc=0.0, T=schedule.T_amb)
    T_mean = None
    labels = np.empty(cycles)
    for n in range(cycles):
        if n == 0:
            params_n = base
        else:
            params_n = apply_degradation(base, n, d_cell, T_mean)
            lost = capacity_loss(n, d_cell, T_mean, base.T_ref) - capacity_loss(n - 1, d_cell, T_mean, base.T_ref)
            state = remove_lithium(state, base, lost)
        start = len(sink)
        _, state = run_schedule(params_n, schedule, seed=int(proto_rng.integers(0, 2**31 - 1)),
                                dt=dt, cell_id=cell_id, state=state, sink=sink, first_cycle=n)
        if n == 0:
            T_mean = float(np.mean(sink.arrays()["T"][start:]))
        labels[n] = soh_of_cycle(n, d_cell, T_mean, base.Q_nom, base.T_ref)
    info = {"cell_id": cell_id, "family": family, "severity": factor, "T_mean": T_mean,
            "soh_final": float(labels[-1])}
    return sink, labels, info


def _simulate_job(job):
    """Simulate one cell and write its telemetry; returns only the small pieces."""
    args, path, comments, stride = job
    sink, labels, info = simulate_cell(*args)
    sink.to_csv(path, comments=comments, stride=stride)
    return labels, info


def generate_fleet(families=FAMILIES, cells_per_family: int = 8, cycles: int = 300, seed: int = 42,
                   out_dir=".", params: CellParameters | None = None,
                   degradation: DegradationParams | None = None, sample_interval: int = 10,
                   dt: float = 1.0, n_jobs: int = 1) -> dict:
    """Simulate a labelled fleet and write telemetry, labels and a JSON manifest.

    Telemetry is thinned to every ``sample_interval``-th step (segment edges
    are always kept); labels hold one SOH value per cell and cycle. Cells are
    independent, so ``n_jobs > 1`` simulates them in worker processes with
    identical results.
    """
    if cycles < 10:
        raise ValueError("cycles must be >= 10")
    unknown = [f for f in families if f not in FAMILIES]
    if unknown:
        raise ValueError(f"unknown family tag(s) {unknown}; valid tags: {', '.join(FAMILIES)}")
    base = params or CellParameters()
    d = degradation or DegradationParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {"families": list(families), "cells_per_family": cells_per_family, "cycles": cycles,
              "seed": seed, "params": base.config_hash(), "degradation": asdict(d),
              "sample_interval": sample_interval, "dt": dt}
    chash = config_hash(config)
    comments = (f"config_hash={chash}", f"seed={seed}")
    jobs = [((fam, f"{fam}_{k:02d}", cycles, seed, FAMILIES.index(fam), k, base, d, dt),
             out / f"{fam}_{k:02d}.csv", comments, sample_interval)
            for fam in families for k in range(cells_per_family)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_simulate_job, jobs))
    else:
        results = [_simulate_job(j) for j in jobs]
    label_rows, files, cells = [], [], []
    for labels, info in results:
        cell_id = info["cell_id"]
        files.append(f"{cell_id}.csv")
        cells.append(info)
        label_rows.extend(f"{cell_id},{n},{s:.8f}" for n, s in enumerate(labels))
        log.info("cell %s: final SOH %.4f", cell_id, labels[-1])
    with (out / "labels.csv").open("w", encoding="utf-8") as fh:
        fh.write("".join(f"# {c}\n" for c in comments))
        fh.write(LABELS_HEADER + "\n")
        fh.write("\n".join(label_rows) + "\n")
    manifest = {"telemetry_files": files, "labels_file": "labels.csv", "seed": seed,
                "config_hash": chash, "config": config, "cells": cells}
    dump_json(manifest, out / "manifest.json", comments)
    return manifest
