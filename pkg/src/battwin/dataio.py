"""Telemetry ingestion, per-cycle feature extraction, splitting and normalization."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._io import load_json
from .protocol import TELEMETRY_HEADER, V_MAX

log = logging.getLogger(__name__)

TELEMETRY_COLUMNS = tuple(TELEMETRY_HEADER.split(","))
FEATURE_NAMES = (
    "discharge_capacity", "discharge_energy", "mean_discharge_V", "V_at_half_capacity",
    "discharge_duration", "T_max", "T_mean", "T_rise", "R_proxy", "cv_duration",
    "charge_capacity", "coulombic_eff", "cycle_norm",
)
CYCLE_NORM = FEATURE_NAMES.index("cycle_norm")
CV_BAND = 0.005


class IngestionError(ValueError):
    def __init__(self, message, lines=()):
        self.lines = tuple(lines)
        if self.lines:
            shown = ", ".join(str(n) for n in self.lines[:20])
            more = f" (+{len(self.lines) - 20} more)" if len(self.lines) > 20 else ""
            message = f"{message}; offending line(s): {shown}{more}"
        super().__init__(message)


class FeatureError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CycleRecord:
    """Time-sorted telemetry for one (cell, cycle); temperature in degrees C."""

    cell_id: str
    cycle: int
    t: np.ndarray
    I: np.ndarray
    V: np.ndarray
    T: np.ndarray


def _comment_lines(path: Path) -> int:
    n = 0
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                n += 1
            else:
                break
    return n


def read_comments(path) -> list[str]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            out.append(line[1:].strip())
    return out


def load_telemetry(path) -> dict:
    """Read a telemetry CSV into ``{(cell_id, cycle): CycleRecord}`` (keys sorted)."""
    path = Path(path)
    skip = _comment_lines(path)
    try:
        df = pd.read_csv(path, skiprows=skip, dtype={"cell_id": str}, float_precision="round_trip",
                         keep_default_na=False, na_values=[], low_memory=False)
    except pd.errors.EmptyDataError as exc:
        raise IngestionError(f"{path}: missing header") from exc
    cols = tuple(df.columns)
    if cols != TELEMETRY_COLUMNS:
        missing = [c for c in TELEMETRY_COLUMNS if c not in cols]
        detail = f"missing column(s) {missing}" if missing else f"unexpected header {','.join(cols)}"
        raise IngestionError(f"{path}: {detail}; expected {TELEMETRY_HEADER}")
    first_data_line = skip + 2
    bad = np.zeros(len(df), dtype=bool)
    numeric = {}
    for col in TELEMETRY_COLUMNS[1:]:
        vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
        bad |= ~np.isfinite(vals)
        numeric[col] = vals
    cyc = numeric["cycle"]
    bad |= np.isfinite(cyc) & (cyc != np.round(cyc))
    bad |= (df["cell_id"].to_numpy(dtype=str) == "")
    if bad.any():
        raise IngestionError(f"{path}: unparsable or non-finite value",
                             (np.flatnonzero(bad) + first_data_line).tolist())
    if len(df) == 0:
        return {}
    cell = df["cell_id"].to_numpy(dtype=str)
    cyc = cyc.astype(np.int64)
    t = numeric["t_s"]
    order = np.lexsort((t, cyc, cell))
    cell_s, cyc_s, t_s = cell[order], cyc[order], t[order]
    same = (cell_s[1:] == cell_s[:-1]) & (cyc_s[1:] == cyc_s[:-1])
    dup = same & (np.diff(t_s) <= 0)
    if dup.any():
        idx = np.flatnonzero(dup)
        lines = sorted(set((order[idx] + first_data_line).tolist() + (order[idx + 1] + first_data_line).tolist()))
        raise IngestionError(f"{path}: time not strictly increasing within a cycle", lines)
    I = numeric["current_a"][order]
    V = numeric["voltage_v"][order]
    T = numeric["temp_c"][order]
    starts = np.concatenate([[0], np.flatnonzero(~same) + 1, [len(order)]])
    out = {}
    for a, b in zip(starts[:-1], starts[1:]):
        key = (str(cell_s[a]), int(cyc_s[a]))
        out[key] = CycleRecord(key[0], key[1], t_s[a:b], I[a:b], V[a:b], T[a:b])
    return out


def load_labels(path) -> dict:
    path = Path(path)
    df = pd.read_csv(path, skiprows=_comment_lines(path), dtype={"cell_id": str}, float_precision="round_trip")
    if tuple(df.columns) != ("cell_id", "cycle", "soh_true"):
        raise IngestionError(f"{path}: expected header cell_id,cycle,soh_true")
    soh = df["soh_true"].to_numpy(dtype=float)
    if not np.all(np.isfinite(soh)):
        raise IngestionError(f"{path}: non-finite soh_true",
                             (np.flatnonzero(~np.isfinite(soh)) + _comment_lines(path) + 2).tolist())
    return {(c, int(n)): float(s) for c, n, s in zip(df["cell_id"], df["cycle"], soh)}


def _intervals(t: np.ndarray) -> np.ndarray:
    """Duration represented by each sample (zero-order hold back to the previous sample)."""
    dt = np.empty_like(t)
    if t.size == 1:
        dt[0] = 0.0
        return dt
    dt[1:] = np.diff(t)
    dt[0] = dt[1]
    return dt


def extract_features(rec: CycleRecord, max_cycle: int | None = None) -> np.ndarray:
    """The 13 per-cycle features (order: ``FEATURE_NAMES``).

    Each sample carries the current applied over the interval since the
    previous sample, so integrals are exact for piecewise-constant current.
    """
    t, I, V, T = rec.t, rec.I, rec.V, rec.T
    dis = I > 0
    if not dis.any():
        raise FeatureError(f"cell {rec.cell_id} cycle {rec.cycle}: no discharge segment")
    dt = _intervals(t)
    q_steps = I[dis] * dt[dis] / 3600.0
    cap = q_steps.sum()
    energy = np.sum(I[dis] * V[dis] * dt[dis]) / 3600.0
    dur = dt[dis].sum()
    mean_v = np.sum(V[dis] * dt[dis]) / dur if dur > 0 else float(V[dis].mean())
    q_cum = np.cumsum(q_steps)
    v_half = float(np.interp(0.5 * cap, q_cum, V[dis]))
    first = int(np.flatnonzero(dis)[0])
    if first == 0:
        raise FeatureError(f"cell {rec.cell_id} cycle {rec.cycle}: discharge starts at the first sample; "
                           "no pre-onset sample for the resistance proxy")
    dI = I[first] - I[first - 1]
    r_proxy = (V[first - 1] - V[first]) / dI if dI != 0 else 0.0
    t_max = float(T.max())
    span = dt.sum()
    t_mean = float(np.sum(T * dt) / span) if span > 0 else float(T.mean())
    t_rise = float(T[dis].max() - T[first - 1])
    chg = I < 0
    chg_cap = float(np.sum(-I[chg] * dt[chg]) / 3600.0)
    absI = np.abs(I)
    decreasing = np.zeros_like(chg)
    decreasing[1:] = absI[1:] < absI[:-1]
    cv = chg & (np.abs(V - V_MAX) < CV_BAND) & decreasing
    cv_dur = float(dt[cv].sum())
    ce = cap / chg_cap if chg_cap > 0 else 1.0
    ce = float(min(ce, 1.02))
    mc = rec.cycle if max_cycle is None else max_cycle
    cnorm = rec.cycle / mc if mc > 0 else 0.0
    feats = np.array([cap, energy, mean_v, v_half, dur, t_max, t_mean, t_rise, r_proxy, cv_dur,
                      chg_cap, ce, cnorm], dtype=float)
    if not np.all(np.isfinite(feats)):
        raise FeatureError(f"cell {rec.cell_id} cycle {rec.cycle}: non-finite feature")
    return feats


@dataclass(eq=False)
class FeatureTable:
    """Rows of per-cycle features keyed by (cell_id, cycle); ``soh`` may be None."""

    cell_id: np.ndarray
    cycle: np.ndarray
    X: np.ndarray
    soh: np.ndarray | None = None
    feature_names: tuple = FEATURE_NAMES
    max_cycle: np.ndarray = field(default=None)

    def __post_init__(self):
        self.cell_id = np.asarray(self.cell_id, dtype=str)
        self.cycle = np.asarray(self.cycle, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.cycle), -1)
        if self.soh is not None:
            self.soh = np.asarray(self.soh, dtype=float)
        if self.max_cycle is None:
            mc = {}
            for c, n in zip(self.cell_id.tolist(), self.cycle.tolist()):
                mc[c] = max(mc.get(c, 0), n)
            self.max_cycle = np.array([mc[c] for c in self.cell_id.tolist()], dtype=np.int64)

    def __len__(self):
        return len(self.cycle)

    @property
    def family(self) -> np.ndarray:
        return np.array([family_of(c) for c in self.cell_id.tolist()])

    def subset(self, mask) -> "FeatureTable":
        return FeatureTable(self.cell_id[mask], self.cycle[mask], self.X[mask],
                            None if self.soh is None else self.soh[mask], self.feature_names,
                            self.max_cycle[mask])

    def to_csv(self, path=None, comments=()):
        cols = ["cell_id", "cycle", *self.feature_names] + (["soh"] if self.soh is not None else [])
        lines = [f"# {c}" for c in comments] + [",".join(cols)]
        for i in range(len(self)):
            vals = [self.cell_id[i], str(self.cycle[i])] + [repr(float(v)) for v in self.X[i]]
            if self.soh is not None:
                vals.append(repr(float(self.soh[i])))
            lines.append(",".join(vals))
        text = "\n".join(lines) + "\n"
        if path is None:
            return text
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        path = Path(path)
        df = pd.read_csv(path, skiprows=_comment_lines(path), dtype={"cell_id": str}, float_precision="round_trip")
        names = tuple(c for c in df.columns if c not in ("cell_id", "cycle", "soh"))
        if list(df.columns[:2]) != ["cell_id", "cycle"] or names != FEATURE_NAMES:
            raise IngestionError(f"{path}: expected header cell_id,cycle,{','.join(FEATURE_NAMES)}[,soh]")
        X = df[list(names)].to_numpy(dtype=float)
        bad = ~np.all(np.isfinite(X), axis=1)
        if bad.any():
            raise IngestionError(f"{path}: non-finite feature", (np.flatnonzero(bad) + _comment_lines(path) + 2).tolist())
        soh = df["soh"].to_numpy(dtype=float) if "soh" in df.columns else None
        return cls(df["cell_id"].to_numpy(dtype=str), df["cycle"].to_numpy(), X, soh)


def family_of(cell_id: str) -> str:
    return cell_id.rsplit("_", 1)[0] if "_" in cell_id else cell_id


def build_features(records: dict, labels: dict | None = None) -> FeatureTable:
    """Extract features for every cycle, deterministically ordered by (cell_id, cycle)."""
    keys = sorted(records)
    max_cycle = {}
    for c, n in keys:
        max_cycle[c] = max(max_cycle.get(c, 0), n)
    X = np.empty((len(keys), len(FEATURE_NAMES)))
    for i, key in enumerate(keys):
        X[i] = extract_features(records[key], max_cycle[key[0]])
    soh = None
    if labels is not None:
        missing = [k for k in keys if k not in labels]
        if missing:
            raise FeatureError(f"no SOH label for {len(missing)} cycle(s), e.g. {missing[0]}")
        soh = np.array([labels[k] for k in keys])
    return FeatureTable([k[0] for k in keys], [k[1] for k in keys], X, soh)


def load_fleet_features(data_dir, manifest: dict | None = None) -> FeatureTable:
    """Features + labels for a generated fleet directory."""
    data_dir = Path(data_dir)
    manifest = manifest or load_json(data_dir / "manifest.json")
    records = {}
    for name in manifest["telemetry_files"]:
        records.update(load_telemetry(data_dir / name))
    labels = load_labels(data_dir / manifest["labels_file"])
    return build_features(records, labels)


def split_by_cell(table: FeatureTable, test_fraction: float = 0.25, seed: int = 42):
    """Hold out whole cells, stratified by family; returns (train, test) tables."""
    if not 0 < test_fraction < 1:
        raise SplitError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    cells = sorted(set(table.cell_id.tolist()))
    by_family = {}
    for c in cells:
        by_family.setdefault(family_of(c), []).append(c)
    test_cells = set()
    for fam in sorted(by_family):
        members = by_family[fam]
        if len(members) < 2:
            raise SplitError(f"family {fam} has {len(members)} cell(s); need at least 2 to split")
        k = min(max(1, int(round(test_fraction * len(members)))), len(members) - 1)
        pick = rng.permutation(len(members))[:k]
        test_cells.update(members[i] for i in sorted(pick))
    mask = np.array([c in test_cells for c in table.cell_id.tolist()])
    return table.subset(~mask), table.subset(mask)


class FeatureNormalizer(TransformerMixin, BaseEstimator):
    """Z-scoring with training statistics; constant columns are dropped."""

    def __init__(self, feature_names=FEATURE_NAMES):
        self.feature_names = feature_names

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise ValueError("cannot fit a normalizer on an empty training set")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        const = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        names = list(self.feature_names) if len(self.feature_names) == X.shape[1] else [
            f"x{i}" for i in range(X.shape[1])]
        self.dropped_ = tuple(n for n, c in zip(names, const) if c)
        if self.dropped_:
            warnings.warn(f"dropping constant feature(s): {', '.join(self.dropped_)}", stacklevel=2)
        self.keep_ = np.flatnonzero(~const)
        self.mean_ = mean
        self.scale_ = np.where(const, 1.0, std)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64, ensure_all_finite=False)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return ((X - self.mean_) / self.scale_)[:, self.keep_]

    def inverse_transform(self, Z):
        check_is_fitted(self, "mean_")
        Z = np.asarray(Z, dtype=float)
        X = np.tile(self.mean_, (Z.shape[0], 1))
        X[:, self.keep_] = Z * self.scale_[self.keep_] + self.mean_[self.keep_]
        return X

    def fingerprint(self) -> str:
        import hashlib
        check_is_fitted(self, "mean_")
        return hashlib.sha256(np.concatenate([self.mean_, self.scale_]).tobytes()).hexdigest()[:16]


def fit_normalizer(train: FeatureTable) -> FeatureNormalizer:
    return FeatureNormalizer(train.feature_names).fit(train.X)
