"""Charge/discharge/rest schedules driving the simulator, and telemetry output."""
from __future__ import annotations

import io
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import _kernels as K
from .params import CellParameters
from .sim import CellState, NumericalError, ParticleState, compiled_tables, initial_state

KINDS = ("cc_discharge", "cc_charge", "cccv_charge", "rest", "random_cc")
FAMILIES = ("C2", "C3", "R2_5", "R3", "RW", "SAT")
TELEMETRY_HEADER = "cell_id,cycle,t_s,current_a,voltage_v,temp_c"

V_MIN = 2.5
V_MAX = 4.2
_MAX_SEGMENT_S = 12 * 3600.0


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolStep:
    """One schedule entry.

    ``magnitude`` is a C-rate. ``limit_v`` is the voltage cutoff (V),
    ``limit_t`` a duration cap (s) and ``taper`` the CV stop current as a
    C-rate. ``rng_spec`` = (rate_min, rate_max, dwell_s): for ``cc_discharge``
    the rate is drawn once per execution, for ``random_cc`` a random walk
    changes it every ``dwell_s`` seconds.
    """

    kind: str
    magnitude: float = 0.0
    limit_v: float | None = None
    limit_t: float | None = None
    taper: float = 0.05
    rng_spec: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown step kind {self.kind!r}; expected one of {KINDS}")
        if self.magnitude < 0 or self.taper < 0:
            raise ProtocolError("step magnitudes must be non-negative")
        if self.limit_v is not None and not 2.0 <= self.limit_v <= 4.4:
            raise ProtocolError(f"voltage cutoff {self.limit_v} outside [2.0, 4.4] V")
        if self.limit_t is not None and self.limit_t <= 0:
            raise ProtocolError("time limit must be positive")
        if self.kind == "rest" and self.limit_t is None:
            raise ProtocolError("rest step needs a time limit")
        if self.kind == "random_cc" and self.rng_spec is None:
            raise ProtocolError("random_cc step needs rng_spec (rate_min, rate_max, dwell_s)")
        if self.rng_spec is not None:
            spec = tuple(float(v) for v in self.rng_spec)
            if len(spec) == 2:
                spec = spec + (60.0,)
            if len(spec) != 3 or not 0 <= spec[0] <= spec[1] or spec[2] <= 0:
                raise ProtocolError(f"bad rng_spec {self.rng_spec!r}")
            object.__setattr__(self, "rng_spec", spec)


@dataclass(frozen=True)
class CycleSchedule:
    steps: tuple
    repeat_count: int = 1
    T_amb: float = 298.15
    family: str = "C2"

    def __post_init__(self):
        if not self.steps:
            raise ProtocolError("schedule has no steps")
        if self.family not in FAMILIES:
            raise ProtocolError(f"unknown family {self.family!r}; valid tags: {', '.join(FAMILIES)}")
        if self.repeat_count < 1:
            raise ProtocolError("repeat_count must be >= 1")
        object.__setattr__(self, "steps", tuple(self.steps))


def family_schedule(family: str, repeat_count: int = 1, T_amb: float = 298.15) -> CycleSchedule:
    """The six operating regimes: charge, rest, then a family-specific discharge."""
    charge = ProtocolStep("cccv_charge", 1.0, limit_v=V_MAX, taper=0.05)
    rest = ProtocolStep("rest", limit_t=600.0)
    if family == "C2":
        dis = ProtocolStep("cc_discharge", 2.0, limit_v=V_MIN)
    elif family == "C3":
        dis = ProtocolStep("cc_discharge", 3.0, limit_v=V_MIN)
    elif family == "R2_5":
        dis = ProtocolStep("cc_discharge", 2.5, limit_v=V_MIN, rng_spec=(2.0, 3.0))
    elif family == "R3":
        dis = ProtocolStep("cc_discharge", 3.0, limit_v=V_MIN, rng_spec=(2.5, 3.5))
    elif family == "RW":
        dis = ProtocolStep("random_cc", 1.0, limit_v=V_MIN, rng_spec=(0.5, 3.0, 60.0))
    elif family == "SAT":
        # orbit-like: long rest, 30% depth-of-discharge eclipse at 0.5C
        rest = ProtocolStep("rest", limit_t=3600.0)
        dis = ProtocolStep("cc_discharge", 0.5, limit_v=V_MIN, limit_t=0.3 * 3600.0 / 0.5)
    else:
        raise ProtocolError(f"unknown family {family!r}; valid tags: {', '.join(FAMILIES)}")
    return CycleSchedule((charge, rest, dis), repeat_count, T_amb, family)


class TelemetrySink:
    """Append-only buffer of (cycle, t, I, V, T[K]) rows."""

    def __init__(self, cell_id: str = "cell"):
        self.cell_id = cell_id
        self._chunks = []

    def append(self, cycle, t, I, V, T):
        if len(t):
            self._chunks.append((np.full(len(t), cycle, dtype=np.int64), np.array(t), np.array(I),
                                 np.array(V), np.array(T)))

    def __len__(self):
        return sum(len(c[1]) for c in self._chunks)

    def arrays(self) -> dict:
        names = ("cycle", "t", "I", "V", "T")
        if not self._chunks:
            return {n: np.empty(0, dtype=np.int64 if n == "cycle" else float) for n in names}
        return {n: np.concatenate([c[i] for c in self._chunks]) for i, n in enumerate(names)}

    def to_csv(self, path=None, comments=(), stride: int = 1) -> str | None:
        return write_telemetry(path, self.cell_id, self.arrays(), comments, stride)


def _keep_mask(cycle, I, stride):
    n = len(I)
    keep = np.zeros(n, dtype=bool)
    keep[::stride] = True
    if n:
        # never drop the rows on either side of a current change or cycle boundary
        edge = np.flatnonzero((np.diff(I) != 0) | (np.diff(cycle) != 0))
        keep[edge] = True
        keep[edge + 1] = True
        keep[-1] = True
    return keep


def write_telemetry(path, cell_id, arrays: dict, comments=(), stride: int = 1) -> str | None:
    """Write telemetry rows; ``stride`` > 1 thins samples but keeps segment edges."""
    cyc, t, I, V, T = (arrays[k] for k in ("cycle", "t", "I", "V", "T"))
    if stride > 1:
        m = _keep_mask(cyc, I, stride)
        cyc, t, I, V, T = cyc[m], t[m], I[m], V[m], T[m]
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    buf.write(TELEMETRY_HEADER + "\n")
    if len(t):
        rows = [f"{cell_id},{c},{a:.3f},{b:.6f},{v:.6f},{tc:.4f}\n"
                for c, a, b, v, tc in zip(cyc.tolist(), t.tolist(), I.tolist(), V.tolist(),
                                          (T - 273.15).tolist())]
        buf.write("".join(rows))
    text = buf.getvalue()
    if path is None:
        return text
    Path(path).write_text(text, encoding="utf-8")
    return None


class _Runner:
    """Holds the mutable kernel-side state for a sequence of steps."""

    def __init__(self, state: CellState, params: CellParameters, T_amb: float, dt: float):
        self.cn = np.array(state.neg.c, dtype=np.float64)
        self.cp = np.array(state.pos.c, dtype=np.float64)
        self.st = np.array([state.T, state.t, state.cumulative_throughput], dtype=np.float64)
        self.params = params
        self.p = params.pack()
        self.tables = compiled_tables(params)
        self.T_amb = float(T_amb)
        self.dt = float(dt)

    def state(self) -> CellState:
        return CellState(ParticleState(self.cn.copy(), "negative"), ParticleState(self.cp.copy(), "positive"),
                         float(self.st[0]), float(self.st[1]), float(self.st[2]))

    def segment(self, mode, value, v_lim, t_lim, taper, sink, cycle, i_start=0.0):
        """Run one kernel segment, growing the buffer as needed; returns (reason, last current)."""
        remaining = t_lim
        last_i = i_start
        while True:
            n_buf = int(min(remaining / self.dt, 20000)) + 1
            bufs = [np.zeros(n_buf) for _ in range(4)]
            bufs[1][0] = last_i
            rows, reason = K.run_segment(self.cn, self.cp, self.st, mode, value, v_lim, remaining,
                                         taper, self.T_amb, self.dt, self.p, *self.tables, *bufs)
            if rows:
                sink.append(cycle, bufs[0][:rows], bufs[1][:rows], bufs[2][:rows], bufs[3][:rows])
                last_i = bufs[1][rows - 1]
            if reason == K.END_BUFFER:
                remaining -= rows * self.dt
                continue
            if reason == K.END_NUMERICAL:
                raise NumericalError(f"non-finite simulator output in cycle {cycle} at t={self.st[1]:.0f} s")
            if reason == K.END_REGULATION:
                raise NumericalError(
                    f"CV regulation did not converge within {K.CV_MAX_ITER} iterations at t={self.st[1]:.0f} s")
            return reason, last_i


def _run(runner: _Runner, step: ProtocolStep, sink, rng, cycle):
    q = runner.params.Q_nom
    t_lim = step.limit_t if step.limit_t is not None else _MAX_SEGMENT_S
    if step.kind == "rest":
        runner.segment(K.REST, 0.0, 0.0, t_lim, 0.0, sink, cycle)
    elif step.kind == "cc_discharge":
        rate = step.magnitude
        if step.rng_spec is not None:
            rate = rng.uniform(step.rng_spec[0], step.rng_spec[1])
        v = step.limit_v if step.limit_v is not None else V_MIN
        runner.segment(K.CC, rate * q, v, t_lim, 0.0, sink, cycle)
    elif step.kind == "cc_charge":
        v = step.limit_v if step.limit_v is not None else V_MAX
        runner.segment(K.CC, -step.magnitude * q, v, t_lim, 0.0, sink, cycle)
    elif step.kind == "cccv_charge":
        v = step.limit_v if step.limit_v is not None else V_MAX
        t0 = runner.st[1]
        reason, last_i = runner.segment(K.CC, -step.magnitude * q, v, t_lim, 0.0, sink, cycle)
        if reason == K.END_VOLTAGE:
            left = t_lim - (runner.st[1] - t0)
            if left > 0:
                runner.segment(K.CV, v, 0.0, left, step.taper * q, sink, cycle, i_start=last_i)
    elif step.kind == "random_cc":
        lo, hi, dwell = step.rng_spec
        v = step.limit_v if step.limit_v is not None else V_MIN
        rate = rng.uniform(lo, hi)
        spent = 0.0
        while spent < t_lim:
            t0 = runner.st[1]
            reason, _ = runner.segment(K.CC, rate * q, v, min(dwell, t_lim - spent), 0.0, sink, cycle)
            spent += runner.st[1] - t0
            if reason != K.END_TIME:
                break
            rate = float(np.clip(rate + rng.uniform(-0.5, 0.5), lo, hi))


def run_step(state: CellState, step: ProtocolStep, params: CellParameters, sink: TelemetrySink,
             dt: float = 1.0, T_amb: float | None = None, rng=None, cycle: int = 0) -> CellState:
    """Apply one protocol step until its termination condition; every timestep goes to ``sink``.

    A surface-saturation event ends the step like a voltage cutoff.
    """
    runner = _Runner(state, params, params.T_ref if T_amb is None else T_amb, dt)
    _run(runner, step, sink, rng if rng is not None else np.random.default_rng(0), cycle)
    return runner.state()


def run_schedule(params: CellParameters, schedule: CycleSchedule, seed: int = 42, dt: float = 1.0,
                 cell_id: str = "cell", state: CellState | None = None,
                 sink: TelemetrySink | None = None, first_cycle: int = 0) -> tuple[TelemetrySink, CellState]:
    """Run ``repeat_count`` cycles; each cycle starts from the previous cycle's end state."""
    rng = np.random.default_rng(seed)
    if state is None:
        state = initial_state(params, soc=0.0, T=schedule.T_amb)
    sink = sink if sink is not None else TelemetrySink(cell_id)
    runner = _Runner(state, params, schedule.T_amb, dt)
    for k in range(schedule.repeat_count):
        for st in schedule.steps:
            _run(runner, st, sink, rng, first_cycle + k)
    return sink, runner.state()


def load_protocol(path) -> CycleSchedule:
    """Parse a protocol TOML file with ``[schedule]`` and ``[[schedule.steps]]`` tables."""
    with Path(path).open("rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ProtocolError(f"{path}: {exc}") from exc
    sched = data.get("schedule")
    if not isinstance(sched, dict):
        raise ProtocolError(f"{path}: missing [schedule] table")
    family = sched.get("family", "C2")
    raw_steps = sched.get("steps")
    if not raw_steps:
        return family_schedule(family, int(sched.get("repeat_count", 1)), float(sched.get("T_amb", 298.15)))
    steps = []
    allowed = {"kind", "magnitude", "limit_v", "limit_t", "taper", "rng_spec"}
    for i, entry in enumerate(raw_steps):
        extra = set(entry) - allowed
        if extra:
            raise ProtocolError(f"{path}: step {i} has unknown keys {sorted(extra)}")
        steps.append(ProtocolStep(**entry))
    return CycleSchedule(tuple(steps), int(sched.get("repeat_count", 1)),
                         float(sched.get("T_amb", 298.15)), family)


def with_repeats(schedule: CycleSchedule, repeat_count: int) -> CycleSchedule:
    return replace(schedule, repeat_count=repeat_count)
