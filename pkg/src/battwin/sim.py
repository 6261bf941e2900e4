"""Single-particle electrochemical model coupled to a lumped thermal node.

Sign convention: positive current discharges the cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import _kernels as K
from .params import CellParameters, OcpTable

N_SHELLS = 20


class SimulationError(RuntimeError):
    """Base class for simulator failures."""


class DomainError(SimulationError, ValueError):
    pass


class SaturationError(SimulationError):
    """Surface stoichiometry hit 0 or 1; protocols treat this as a cutoff."""


class NumericalError(SimulationError, ArithmeticError):
    pass


ELECTRODES = ("negative", "positive")


def _tag(electrode: str) -> str:
    if electrode in ("negative", "neg", "n"):
        return "negative"
    if electrode in ("positive", "pos", "p"):
        return "positive"
    raise ValueError(f"unknown electrode {electrode!r}; expected one of {ELECTRODES}")


@lru_cache(maxsize=64)
def _compiled_table(table: OcpTable):
    interp = PchipInterpolator(np.asarray(table.x), np.asarray(table.u), extrapolate=False)
    return np.ascontiguousarray(interp.x, dtype=np.float64), np.ascontiguousarray(interp.c, dtype=np.float64)


def compiled_tables(params: CellParameters):
    xbn, cfn = _compiled_table(params.ocp_neg)
    xbp, cfp = _compiled_table(params.ocp_pos)
    return xbn, cfn, xbp, cfp


def ocp_eval(electrode: str, stoichiometry: float, params: CellParameters | None = None,
             table: OcpTable | None = None) -> float:
    """Open-circuit potential (V) of one electrode, monotone-cubic in stoichiometry."""
    electrode = _tag(electrode)
    x = float(stoichiometry)
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"{electrode} electrode stoichiometry {x!r} outside [0, 1]")
    if table is None:
        params = params or CellParameters()
        table = params.ocp_neg if electrode == "negative" else params.ocp_pos
    xb, coef = _compiled_table(table)
    return float(K.pchip_eval(xb, coef, x))


def ocv_at_soc(params: CellParameters, soc: float) -> float:
    xn, xp = soc_to_stoichiometry(params, soc)
    return ocp_eval("positive", xp, params) - ocp_eval("negative", xn, params)


def soc_to_stoichiometry(params: CellParameters, soc: float) -> tuple[float, float]:
    xn = params.x_n_min + soc * (params.x_n_max - params.x_n_min)
    xp = params.x_p_max - soc * (params.x_p_max - params.x_p_min)
    return xn, xp


def arrhenius_scale(value_ref: float, Ea: float, T: float, T_ref: float) -> float:
    if T <= 0 or T_ref <= 0:
        raise DomainError(f"temperatures must be positive, got T={T}, T_ref={T_ref}")
    return float(K.arrhenius(float(value_ref), float(Ea), float(T), float(T_ref)))


def exchange_current(k_eff: float, c_e: float, c_surf: float, c_max: float) -> float:
    """Exchange current density (A/m^2) for symmetric Butler-Volmer kinetics."""
    if not (0.0 < c_surf < c_max):
        raise SaturationError(
            f"surface concentration {c_surf!r} outside (0, {c_max!r}); stoichiometry exhausted")
    return float(K.exchange_current(float(k_eff), float(c_e), float(c_surf), float(c_max)))


def overpotential(i_area: float, j0: float, T: float) -> float:
    if not j0 > 0:
        raise DomainError(f"exchange current density must be positive, got {j0!r}")
    return float(K.overpotential(float(i_area), float(j0), float(T)))


@dataclass(frozen=True, eq=False)
class ParticleState:
    c: np.ndarray
    electrode: str

    def __post_init__(self):
        c = np.array(self.c, dtype=np.float64)
        if c.ndim != 1 or c.size < 3:
            raise ValueError("particle needs at least 3 radial shells")
        if not np.all(np.isfinite(c)):
            raise NumericalError(f"non-finite concentration in {self.electrode} particle")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "electrode", _tag(self.electrode))

    def total(self, radius: float) -> float:
        """Moles of lithium in one particle of the given radius."""
        return 4.0 * math.pi * float(np.dot(K.shell_volumes(radius, self.c.size), self.c))

    def mean(self, radius: float) -> float:
        vol = K.shell_volumes(radius, self.c.size)
        return float(np.dot(vol, self.c) / vol.sum())


@dataclass(frozen=True, eq=False)
class CellState:
    neg: ParticleState
    pos: ParticleState
    T: float
    t: float = 0.0
    cumulative_throughput: float = 0.0

    def mean_stoichiometry(self, params: CellParameters) -> tuple[float, float]:
        return (self.neg.mean(params.R_part_n) / params.c_max_n,
                self.pos.mean(params.R_part_p) / params.c_max_p)

    def lithium_inventory(self, params: CellParameters) -> float:
        """Total cyclable lithium (mol) in both electrodes."""
        vn = params.eps_n * params.L_n * params.A_cell
        vp = params.eps_p * params.L_p * params.A_cell
        return vn * self.neg.mean(params.R_part_n) + vp * self.pos.mean(params.R_part_p)


@dataclass(frozen=True)
class StepOutput:
    V: float
    T: float
    Q_gen: float
    eta_n: float
    eta_p: float
    ocv: float


def initial_state(params: CellParameters, soc: float = 1.0, T: float | None = None,
                  n_shells: int = N_SHELLS) -> CellState:
    """Equilibrated (uniform) state at the given state of charge."""
    if not 0.0 <= soc <= 1.0:
        raise DomainError(f"soc {soc!r} outside [0, 1]")
    xn, xp = soc_to_stoichiometry(params, soc)
    return CellState(
        neg=ParticleState(np.full(n_shells, xn * params.c_max_n), "negative"),
        pos=ParticleState(np.full(n_shells, xp * params.c_max_p), "positive"),
        T=params.T_ref if T is None else float(T),
    )


def diffusion_step(p: ParticleState, flux_surface: float, D_eff: float, dt: float,
                   radius: float) -> ParticleState:
    """One implicit step of spherical Fickian diffusion.

    ``flux_surface`` is the outward molar flux (mol m^-2 s^-1) at the particle
    surface; the particle loses ``4 pi R^2 flux dt`` moles.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    out = np.empty_like(p.c)
    code = K.diffusion_solve(np.ascontiguousarray(p.c), float(flux_surface), float(D_eff),
                             float(dt), float(radius), out)
    if code != K.OK:
        raise NumericalError(f"diffusion solve produced non-finite values ({p.electrode})")
    return ParticleState(out, p.electrode)


def _effective_rates(params: CellParameters, T: float):
    p = params
    return (arrhenius_scale(p.D_n, p.Ea_D, T, p.T_ref), arrhenius_scale(p.D_p, p.Ea_D, T, p.T_ref),
            arrhenius_scale(p.k_n, p.Ea_k, T, p.T_ref), arrhenius_scale(p.k_p, p.Ea_k, T, p.T_ref))


def _raise_for(code: int, context: str):
    if code == K.SATURATED:
        raise SaturationError(f"surface stoichiometry exhausted during {context}")
    if code == K.NONFINITE:
        raise NumericalError(f"non-finite result during {context}")
    if code != K.OK:
        raise SimulationError(f"kernel failure {code} during {context}")


def terminal_voltage(state: CellState, I: float, params: CellParameters) -> StepOutput:
    """Terminal voltage and heat for current ``I`` applied to ``state`` (no time advance)."""
    dn, dp, kn, kp = _effective_rates(params, state.T)
    out = np.zeros(5)
    code = K.voltage_kernel(state.neg.c, state.pos.c, float(state.T), float(I), params.pack(),
                            dn, dp, kn, kp, *compiled_tables(params), out)
    _raise_for(code, "terminal_voltage")
    return StepOutput(V=out[0], T=state.T, Q_gen=out[4], eta_n=out[2], eta_p=out[3], ocv=out[1])


def thermal_step(T: float, Q_gen: float, T_amb: float, params: CellParameters, dt: float) -> float:
    T_new = T + dt * (Q_gen - params.hA * (T - T_amb)) / params.C_th
    if not math.isfinite(T_new):
        raise NumericalError("non-finite temperature in thermal_step")
    return T_new


def step(state: CellState, I: float, T_amb: float, dt: float,
         params: CellParameters) -> tuple[CellState, StepOutput]:
    """Advance the coupled model by ``dt`` seconds at constant current ``I``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    cn = np.empty_like(state.neg.c)
    cp = np.empty_like(state.pos.c)
    out = np.zeros(6)
    code = K.step_kernel(state.neg.c, state.pos.c, float(state.T), float(I), float(T_amb),
                         float(dt), params.pack(), *compiled_tables(params), cn, cp, out)
    _raise_for(code, "step")
    new = CellState(
        neg=ParticleState(cn, "negative"),
        pos=ParticleState(cp, "positive"),
        T=float(out[5]),
        t=state.t + dt,
        cumulative_throughput=state.cumulative_throughput + abs(I) * dt / 3600.0,
    )
    return new, StepOutput(V=out[0], T=out[5], Q_gen=out[4], eta_n=out[2], eta_p=out[3], ocv=out[1])


@dataclass
class Simulator:
    """Mutable convenience wrapper owning one cell's state."""

    params: CellParameters = field(default_factory=CellParameters)
    state: CellState | None = None
    T_amb: float | None = None
    dt: float = 1.0

    def __post_init__(self):
        if self.T_amb is None:
            self.T_amb = self.params.T_ref
        if self.state is None:
            self.state = initial_state(self.params, 1.0, self.T_amb)

    def advance(self, I: float) -> StepOutput:
        self.state, out = step(self.state, I, self.T_amb, self.dt, self.params)
        return out
