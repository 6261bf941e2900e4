"""Cell parameter set, open-circuit potential tables and the TOML parameter file."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

F = 96485.33212
R_GAS = 8.314462618

# Breakpoint tables (stoichiometry -> volts), graphite negative / NCM positive.
DEFAULT_OCP_NEG = (
    (0.0, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.065, 0.08, 0.1, 0.12, 0.14, 0.17,
     0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 0.6, 0.65, 0.7, 0.8, 0.9, 0.95, 1.0),
    (2.383542, 2.029881, 1.739382, 1.304718, 1.011292, 0.812987, 0.678571, 0.552046,
     0.476355, 0.406516, 0.339435, 0.278309, 0.232088, 0.216986, 0.195062, 0.162973,
     0.142112, 0.13524, 0.133086, 0.118751, 0.095378, 0.092194, 0.0915, 0.0880,
     0.0850, 0.0800),
)
DEFAULT_OCP_POS = (
    (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.28, 0.31, 0.34, 0.38, 0.42, 0.46, 0.5, 0.55,
     0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.88, 0.9, 0.92, 0.94, 0.96, 0.98, 1.0),
    (4.67851, 4.637446, 4.594483, 4.544209, 4.468983, 4.336596, 4.244772, 4.19528,
     4.181877, 4.13707, 4.07353, 4.020159, 3.971959, 3.8987, 3.824474, 3.77292,
     3.730403, 3.689615, 3.64911, 3.608652, 3.584381, 3.5682, 3.55202, 3.53584,
     3.51966, 3.50348, 3.4873),
)


class ParameterError(ValueError):
    """Invalid parameter set or parameter file."""


@dataclass(frozen=True)
class OcpTable:
    """Monotone breakpoint table for one electrode's open-circuit potential."""

    x: tuple
    u: tuple

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if x.ndim != 1 or x.shape != u.shape or x.size < 2:
            raise ParameterError("OCP table needs matching 1-D x/u arrays of length >= 2")
        if not (np.all(np.diff(x) > 0) and np.all(np.diff(u) < 0)):
            raise ParameterError("OCP table must be strictly increasing in x and strictly decreasing in u")
        if x[0] > 0.0 or x[-1] < 1.0:
            raise ParameterError("OCP table must cover stoichiometry [0, 1]")
        object.__setattr__(self, "x", tuple(float(v) for v in x))
        object.__setattr__(self, "u", tuple(float(v) for v in u))


# Field order here is the packed-vector layout used by the compiled kernels.
PACKED_FIELDS = (
    "D_n", "D_p", "k_n", "k_p", "R_part_n", "R_part_p", "eps_n", "eps_p", "L_n", "L_p",
    "A_cell", "c_max_n", "c_max_p", "x_n_min", "x_n_max", "x_p_min", "x_p_max",
    "R0", "C_th", "hA", "Ea_D", "Ea_k", "c_e", "T_ref", "Q_nom",
)
IDX = {name: i for i, name in enumerate(PACKED_FIELDS)}

_SECTIONS = {
    "electrochemical": ("D_n", "D_p", "k_n", "k_p", "R_part_n", "R_part_p", "eps_n", "eps_p",
                        "L_n", "L_p", "A_cell", "c_max_n", "c_max_p", "R0", "Ea_D", "Ea_k",
                        "c_e", "Q_nom"),
    "thermal": ("C_th", "hA", "T_ref"),
    "windows": ("x_n_min", "x_n_max", "x_p_min", "x_p_max"),
}


@dataclass(frozen=True)
class CellParameters:
    """Physical parameters of the single-particle electrochemical-thermal cell (SI units).

    The defaults are the reference "truth" cell: a 2.0 Ah, 3.6 V nominal
    NCM/graphite 18650 whose 1C discharge from full to 2.5 V delivers 2.0 Ah.
    """

    D_n: float = 3.3e-14
    D_p: float = 4.0e-15
    k_n: float = 2.0e-11
    k_p: float = 3.5e-11
    R_part_n: float = 5.86e-6
    R_part_p: float = 5.22e-6
    eps_n: float = 0.75
    eps_p: float = 0.665
    L_n: float = 85.2e-6
    L_p: float = 75.6e-6
    A_cell: float = 0.04140
    c_max_n: float = 33133.0
    c_max_p: float = 63104.0
    x_n_min: float = 0.04
    x_n_max: float = 0.90
    x_p_min: float = 0.27
    x_p_max: float = 0.8437
    R0: float = 0.025
    C_th: float = 45.0
    hA: float = 0.1
    Ea_D: float = 3.0e4
    Ea_k: float = 3.0e4
    c_e: float = 1000.0
    T_ref: float = 298.15
    Q_nom: float = 2.0
    ocp_neg: OcpTable = field(default_factory=lambda: OcpTable(*DEFAULT_OCP_NEG))
    ocp_pos: OcpTable = field(default_factory=lambda: OcpTable(*DEFAULT_OCP_POS))

    def __post_init__(self):
        for name in PACKED_FIELDS:
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ParameterError(f"{name} must be finite and strictly positive, got {v!r}")
        for e in ("n", "p"):
            lo, hi = getattr(self, f"x_{e}_min"), getattr(self, f"x_{e}_max")
            if not 0.0 < lo < hi < 1.0:
                raise ParameterError(f"stoichiometry window for electrode {e} must satisfy 0 < min < max < 1, got [{lo}, {hi}]")
            if not getattr(self, f"eps_{e}") < 1.0:
                raise ParameterError(f"eps_{e} must lie in (0, 1)")

    def replace(self, **changes) -> "CellParameters":
        return dataclasses.replace(self, **changes)

    def pack(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PACKED_FIELDS], dtype=np.float64)

    def electrode_capacity(self, electrode: str) -> float:
        """Charge (Ah) stored per unit stoichiometry span in one electrode."""
        e = "n" if electrode in ("negative", "neg", "n") else "p"
        vol = getattr(self, f"eps_{e}") * getattr(self, f"L_{e}") * self.A_cell
        return vol * getattr(self, f"c_max_{e}") * F / 3600.0

    def window_capacity(self) -> float:
        """Ah between the SOC=0 and SOC=1 stoichiometry windows (limited by the smaller electrode)."""
        qn = self.electrode_capacity("negative") * (self.x_n_max - self.x_n_min)
        qp = self.electrode_capacity("positive") * (self.x_p_max - self.x_p_min)
        return min(qn, qp)

    def to_dict(self) -> dict:
        out = {sec: {k: getattr(self, k) for k in keys} for sec, keys in _SECTIONS.items()}
        out["ocp"] = {
            "negative": {"x": list(self.ocp_neg.x), "u": list(self.ocp_neg.u)},
            "positive": {"x": list(self.ocp_pos.x), "u": list(self.ocp_pos.u)},
        }
        return out

    @classmethod
    def from_dict(cls, data: dict, base: "CellParameters | None" = None) -> "CellParameters":
        base = base or cls()
        changes = {}
        known = {k for keys in _SECTIONS.values() for k in keys}
        for sec, keys in _SECTIONS.items():
            for k, v in data.get(sec, {}).items():
                if k not in keys:
                    hint = " (belongs to another section)" if k in known else ""
                    raise ParameterError(f"unknown key {k!r} in section [{sec}]{hint}")
                changes[k] = float(v)
        unknown = set(data) - set(_SECTIONS) - {"ocp", "meta"}
        if unknown:
            raise ParameterError(f"unknown section(s): {sorted(unknown)}")
        ocp = data.get("ocp", {})
        for tag, attr in (("negative", "ocp_neg"), ("positive", "ocp_pos")):
            if tag in ocp:
                try:
                    changes[attr] = OcpTable(tuple(ocp[tag]["x"]), tuple(ocp[tag]["u"]))
                except KeyError as exc:
                    raise ParameterError(f"[ocp.{tag}] needs both 'x' and 'u' arrays") from exc
        return base.replace(**changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_params(path) -> CellParameters:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ParameterError(f"{path}: {exc}") from exc
    return CellParameters.from_dict(data)


def dump_params(params: CellParameters, path, header: str | None = None) -> None:
    text = tomli_w.dumps(params.to_dict())
    if header:
        text = "".join(f"# {line}\n" for line in header.splitlines()) + text
    Path(path).write_text(text, encoding="utf-8")


def field_names() -> tuple:
    return tuple(f.name for f in fields(CellParameters) if f.name in IDX)
