import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from battwin._io import load_json
from battwin.dataio import load_labels
from battwin.degrade import (DegradationParams, EndOfLifeError, age_cell, apply_degradation, capacity_loss,
                             generate_fleet, remove_lithium, soh_of_cycle)
from battwin.protocol import V_MIN, ProtocolStep, TelemetrySink, run_step
from battwin.sim import initial_state

D = DegradationParams()


def test_soh_closed_form():
    assert soh_of_cycle(0, D) == 1.0
    hand = 1 - (0.012 * math.sqrt(500) + 0.00025 * 500) / 2.0
    assert soh_of_cycle(500, D) == pytest.approx(hand, rel=1e-14)
    assert hand == pytest.approx(0.8033, abs=1e-4)


@given(st.integers(0, 2000), st.floats(280, 330))
def test_soh_monotone(n, T):
    assert soh_of_cycle(n + 1, D, T) <= soh_of_cycle(n, D, T)


def test_end_of_life():
    with pytest.raises(EndOfLifeError):
        soh_of_cycle(100, DegradationParams(beta_lin=0.05))
    with pytest.raises(ValueError):
        DegradationParams(beta_sqrt=-1)


def test_apply_degradation_identity_and_resistance(truth):
    assert apply_degradation(truth, 0, D) is truth
    aged = apply_degradation(truth, 200, D)
    assert aged.R0 == pytest.approx(truth.R0 * 1.10, rel=1e-14)


def _capacity(params):
    sink = TelemetrySink()
    run_step(initial_state(params, 1.0), ProtocolStep("cc_discharge", 1.0, limit_v=V_MIN), params, sink)
    return np.sum(sink.arrays()["I"]) / 3600.0


@pytest.mark.parametrize("n", [100, 300])
def test_aged_capacity_matches_label(truth, n):
    aged = age_cell(truth, n, D)
    assert _capacity(aged.params_at_n) == pytest.approx(aged.soh * truth.Q_nom, rel=0.01)


def test_aged_to_085_capacity(truth):
    # cycle count where SOH ~ 0.85 at T_ref
    n = next(k for k in range(1, 2000) if soh_of_cycle(k, D) <= 0.85)
    aged = age_cell(truth, n, D)
    assert aged.soh == pytest.approx(0.85, abs=2e-3)
    assert _capacity(aged.params_at_n) == pytest.approx(aged.soh * 2.0, rel=0.01)


def test_remove_lithium_bookkeeping(truth):
    s = initial_state(truth, 0.5)
    s2 = remove_lithium(s, truth, 0.05)
    lost = (s.lithium_inventory(truth) - s2.lithium_inventory(truth)) * 96485.33212 / 3600.0
    assert lost == pytest.approx(0.05, rel=1e-12)


def test_capacity_loss_negative_cycle():
    with pytest.raises(ValueError):
        capacity_loss(-1, D, 298.15)


def test_small_fleet_layout_and_determinism(tmp_path):
    a = generate_fleet(["C2", "SAT"], 2, 12, seed=9, out_dir=tmp_path / "a")
    b = generate_fleet(["C2", "SAT"], 2, 12, seed=9, out_dir=tmp_path / "b")
    assert a["config_hash"] == b["config_hash"]
    assert sorted(a["telemetry_files"]) == ["C2_00.csv", "C2_01.csv", "SAT_00.csv", "SAT_01.csv"]
    for name in a["telemetry_files"] + ["labels.csv", "manifest.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / name).read_text().startswith("# config_hash=")
    labels = load_labels(tmp_path / "a" / "labels.csv")
    assert len(labels) == 4 * 12
    for cell in ("C2_00", "SAT_01"):
        track = [labels[(cell, n)] for n in range(12)]
        assert track[0] == 1.0 and np.all(np.diff(track) <= 0)
    assert load_json(tmp_path / "a" / "manifest.json")["seed"] == 9
    c = generate_fleet(["C2", "SAT"], 2, 12, seed=10, out_dir=tmp_path / "c")
    assert c["config_hash"] != a["config_hash"]


def test_fleet_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError, match="valid tags"):
        generate_fleet(["XX"], 1, 20, out_dir=tmp_path)
    with pytest.raises(ValueError):
        generate_fleet(["C2"], 1, 5, out_dir=tmp_path)
