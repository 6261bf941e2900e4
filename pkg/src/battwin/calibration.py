"""Bayesian-optimization calibration of cell parameters against voltage/temperature telemetry."""
from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .gp import gp_fit, lhs_init, propose_next
from .params import IDX, CellParameters, ParameterError
from .protocol import V_MIN, ProtocolStep, TelemetrySink, run_step
from .sim import SimulationError, initial_state

log = logging.getLogger(__name__)

PENALTY = 1e3
DEFAULT_RATES = (1.0, 2.0, 3.0)
DEFAULT_NAMES = ("D_n", "D_p", "k_n", "k_p", "R0", "eps_n", "eps_p", "L_n", "L_p",
                 "R_part_n", "R_part_p", "hA", "C_th", "Ea_D", "Ea_k")
LOG_SCALED = {"D_n", "D_p", "k_n", "k_p"}


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpaceEntry:
    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self):
        if self.name not in IDX:
            raise ParameterError(f"{self.name!r} is not a CellParameters field")
        if not self.lower < self.upper:
            raise ParameterError(f"{self.name}: lower bound must be below upper bound")
        if self.scale not in ("linear", "log"):
            raise ParameterError(f"{self.name}: scale must be 'linear' or 'log'")
        if self.scale == "log" and self.lower <= 0:
            raise ParameterError(f"{self.name}: log-scaled bounds must be positive")

    def decode(self, u: float) -> float:
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            return math.exp(lo + u * (hi - lo))
        return self.lower + u * (self.upper - self.lower)

    def encode(self, value: float) -> float:
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            return (math.log(value) - lo) / (hi - lo)
        return (value - self.lower) / (self.upper - self.lower)


@dataclass(frozen=True)
class ParameterSpace:
    entries: tuple

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ParameterError("duplicate names in parameter space")
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> tuple:
        return tuple(e.name for e in self.entries)

    def decode(self, x_unit) -> dict:
        x = np.asarray(x_unit, dtype=float)
        return {e.name: e.decode(float(u)) for e, u in zip(self.entries, x)}

    def encode(self, params: CellParameters) -> np.ndarray:
        return np.array([e.encode(getattr(params, e.name)) for e in self.entries])

    def overlay(self, base: CellParameters, x_unit) -> CellParameters:
        return base.replace(**self.decode(x_unit))

    @classmethod
    def around(cls, params: CellParameters, rel: float = 0.3, names=DEFAULT_NAMES) -> "ParameterSpace":
        """Box of +-``rel`` around ``params`` (multiplicative 1+rel for log-scaled entries)."""
        entries = []
        for n in names:
            v = getattr(params, n)
            if n in LOG_SCALED:
                entries.append(SpaceEntry(n, v / (1.0 + rel), v * (1.0 + rel), "log"))
            else:
                entries.append(SpaceEntry(n, v * (1.0 - rel), v * (1.0 + rel), "linear"))
        return cls(tuple(entries))

    @classmethod
    def from_toml(cls, path) -> "ParameterSpace":
        with Path(path).open("rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ParameterError(f"{path}: {exc}") from exc
        rows = data.get("parameters") or data.get("space")
        if not rows:
            raise ParameterError(f"{path}: expected a [[parameters]] array of tables")
        return cls(tuple(SpaceEntry(r["name"], float(r["lower"]), float(r["upper"]),
                                    r.get("scale", "linear")) for r in rows))

    def to_toml(self) -> str:
        out = []
        for e in self.entries:
            out.append(f'[[parameters]]\nname = "{e.name}"\nlower = {e.lower!r}\nupper = {e.upper!r}\n'
                       f'scale = "{e.scale}"\n')
        return "\n".join(out)


@dataclass(frozen=True, eq=False)
class ReferenceCurve:
    """Measured discharge at one C-rate; temperature in kelvin."""

    rate: float
    t: np.ndarray
    V: np.ndarray
    T: np.ndarray
    T_amb: float = 298.15


def simulate_discharge(params: CellParameters, rate: float, T_amb: float = 298.15, dt: float = 1.0):
    """Constant-current discharge from an equilibrated full cell to the lower cutoff."""
    sink = TelemetrySink()
    state = initial_state(params, soc=1.0, T=T_amb)
    run_step(state, ProtocolStep("cc_discharge", rate, limit_v=V_MIN), params, sink, dt=dt, T_amb=T_amb)
    a = sink.arrays()
    return a["t"], a["V"], a["T"]


def make_reference(params: CellParameters, rates=DEFAULT_RATES, T_amb: float = 298.15) -> list:
    out = []
    for r in rates:
        t, V, T = simulate_discharge(params, r, T_amb)
        out.append(ReferenceCurve(float(r), t, V, T, T_amb))
    return out


def mape(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    return float(100.0 * np.mean(np.abs(y - np.asarray(y_hat, dtype=float)) / np.abs(y)))


@dataclass
class EvaluationRecord:
    x_unit: np.ndarray
    theta: dict
    J: float
    per_rate: list = field(default_factory=list)   # (rate, mape_v, mape_t)
    failed: bool = False


def objective(params: CellParameters, reference) -> tuple[float, list]:
    """Mean over rates of voltage MAPE + temperature MAPE (kelvin), simulation resampled on reference times."""
    per_rate = []
    total = 0.0
    for ref in reference:
        t, V, T = simulate_discharge(params, ref.rate, ref.T_amb)
        if len(t) < 2:
            raise SimulationError(f"simulation at {ref.rate}C produced {len(t)} sample(s)")
        v_hat = np.interp(ref.t, t, V)
        T_hat = np.interp(ref.t, t, T)
        mv, mt = mape(ref.V, v_hat), mape(ref.T, T_hat)
        per_rate.append((ref.rate, mv, mt))
        total += mv + mt
    return total / len(reference), per_rate


def evaluate(space: ParameterSpace, base: CellParameters, reference, x_unit) -> EvaluationRecord:
    theta = space.decode(x_unit)
    try:
        params = base.replace(**theta)
        J, per_rate = objective(params, reference)
        if not math.isfinite(J):
            raise SimulationError("non-finite objective")
    except (SimulationError, ParameterError, ArithmeticError) as exc:
        log.debug("evaluation failed at %s: %s", theta, exc)
        return EvaluationRecord(np.asarray(x_unit, float), theta, PENALTY,
                                [(ref.rate, float("nan"), float("nan")) for ref in reference], True)
    return EvaluationRecord(np.asarray(x_unit, float), theta, J, per_rate)


def _surrogate_target(J: np.ndarray) -> np.ndarray:
    return np.log(J + 1e-6)


def calibrate(space: ParameterSpace, reference, budget: int = 120, seed: int = 42,
              base: CellParameters | None = None, n_init: int | None = None):
    """Latin-hypercube start, then GP-EI proposals until ``budget`` evaluations.

    The surrogate models log(J). Returns (best record, history list).
    """
    base = base or CellParameters()
    n0 = 2 * space.dim if n_init is None else n_init
    if budget < n0:
        raise CalibrationError(f"budget {budget} below the required minimum of {n0} (2 x dim)")
    rng = np.random.default_rng(seed)
    history = []
    for x in lhs_init(space.dim, n0, int(rng.integers(2**31))):
        history.append(evaluate(space, base, reference, x))
    while len(history) < budget:
        X = np.array([h.x_unit for h in history])
        J = np.array([h.J for h in history])
        y = _surrogate_target(J)
        g = gp_fit(X, y)
        i_best = int(np.argmin(J))
        x_next = propose_next(g, float(g.standardize(y[i_best])), X[i_best], int(rng.integers(2**31)))
        history.append(evaluate(space, base, reference, x_next))
        log.info("iter %d: J=%.4f best=%.4f", len(history), history[-1].J, min(J.min(), history[-1].J))
    if all(h.failed for h in history):
        raise CalibrationError("every calibration evaluation failed")
    best = min(history, key=lambda h: h.J)
    return best, history


def best_so_far(history) -> np.ndarray:
    return np.minimum.accumulate(np.array([h.J for h in history]))


def history_csv(history, space: ParameterSpace, rates=None) -> str:
    rates = rates or [r for r, _, _ in history[0].per_rate]
    tags = [f"{r:g}c" for r in rates]
    cols = (["iter", "J"] + [f"mape_{k}_{t}" for t in tags for k in ("v", "t")] + list(space.names)
            + ["best_J", "failed"])
    lines = [",".join(cols)]
    best = best_so_far(history)
    for i, h in enumerate(history):
        vals = [str(i), repr(h.J)]
        for _, mv, mt in h.per_rate:
            vals += [repr(mv), repr(mt)]
        vals += [repr(h.theta[n]) for n in space.names]
        vals += [repr(float(best[i])), str(int(h.failed))]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def reference_from_records(records: dict, Q_nom: float = 2.0, T_amb: float = 298.15) -> list:
    """One reference curve per telemetry cycle, C-rate inferred from the median discharge current."""
    out = []
    for key in sorted(records):
        rec = records[key]
        dis = rec.I > 0
        if not dis.any():
            continue
        rate = round(float(np.median(rec.I[dis])) / Q_nom * 2) / 2
        out.append(ReferenceCurve(rate, rec.t[dis] - rec.t[dis][0] + (rec.t[1] - rec.t[0] if len(rec.t) > 1 else 1.0),
                                  rec.V[dis], rec.T[dis] + 273.15, T_amb))
    if not out:
        raise CalibrationError("reference telemetry has no discharge segments")
    return sorted(out, key=lambda r: r.rate)


class BayesianCalibrator(BaseEstimator):
    """Estimator wrapper: ``fit(reference)`` runs the calibration loop."""

    def __init__(self, space=None, budget=120, seed=42, base_params=None, n_init=None):
        self.space = space
        self.budget = budget
        self.seed = seed
        self.base_params = base_params
        self.n_init = n_init

    def fit(self, reference, y=None):
        base = self.base_params or CellParameters()
        space = self.space or ParameterSpace.around(base)
        self.space_ = space
        self.best_record_, self.history_ = calibrate(space, reference, self.budget, self.seed, base, self.n_init)
        self.best_params_ = base.replace(**self.best_record_.theta)
        return self

    def score(self, reference, y=None) -> float:
        """Negative objective of the calibrated parameters (higher is better)."""
        J, _ = objective(self.best_params_, reference)
        return -J


OVERLAY_HEADER = "rate_c,t_s,v_ref,v_sim,temp_ref_k,temp_sim_k"


def overlay_csv(params: CellParameters, reference) -> str:
    """Reference vs. simulated voltage and temperature per rate on the reference time grid."""
    lines = [OVERLAY_HEADER]
    for ref in reference:
        t, V, T = simulate_discharge(params, ref.rate, ref.T_amb)
        v_hat = np.interp(ref.t, t, V)
        T_hat = np.interp(ref.t, t, T)
        lines.extend(f"{ref.rate:g},{a:.3f},{b:.6f},{c:.6f},{d:.4f},{e:.4f}"
                     for a, b, c, d, e in zip(ref.t, ref.V, v_hat, ref.T, T_hat))
    return "\n".join(lines) + "\n"
