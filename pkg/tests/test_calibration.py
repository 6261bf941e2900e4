import numpy as np
import pytest

from battwin.calibration import (DEFAULT_NAMES, PENALTY, BayesianCalibrator, CalibrationError, ParameterSpace,
                                 ReferenceCurve, SpaceEntry, best_so_far, calibrate, evaluate, history_csv,
                                 make_reference, mape, objective, overlay_csv, reference_from_records)
from battwin.params import ParameterError


@pytest.fixture(scope="module")
def ref3(truth):
    return make_reference(truth, rates=(3.0,))


def test_mape_uniform_scaling():
    y = np.linspace(3.0, 4.2, 50)
    assert mape(y, 0.99 * y) == pytest.approx(1.0, abs=1e-12)


def test_truth_self_consistency(truth):
    ref = make_reference(truth)
    J, per_rate = objective(truth, ref)
    assert J <= 0.05
    assert [r for r, _, _ in per_rate] == [1.0, 2.0, 3.0]


def test_resampled_reference_small_error(truth):
    ref = make_reference(truth, rates=(2.0,))[0]
    thin = ReferenceCurve(2.0, ref.t[::7], ref.V[::7], ref.T[::7])
    J, _ = objective(truth, [thin])
    assert J <= 0.05


def test_space_around_and_roundtrip(truth, tmp_path):
    sp = ParameterSpace.around(truth)
    assert sp.dim == 15 and sp.names == DEFAULT_NAMES
    x = sp.encode(truth)
    np.testing.assert_allclose(x, 0.5, atol=1e-12)
    back = sp.overlay(truth, x)
    for n in sp.names:
        assert getattr(back, n) == pytest.approx(getattr(truth, n), rel=1e-12)
    p = tmp_path / "space.toml"
    p.write_text(sp.to_toml())
    assert ParameterSpace.from_toml(p) == sp


def test_space_validation():
    with pytest.raises(ParameterError):
        SpaceEntry("nope", 0, 1)
    with pytest.raises(ParameterError):
        SpaceEntry("R0", 1, 0)
    with pytest.raises(ParameterError):
        SpaceEntry("R0", -1, 1, "log")
    with pytest.raises(ParameterError, match="duplicate"):
        ParameterSpace((SpaceEntry("R0", 0.01, 0.02), SpaceEntry("R0", 0.01, 0.03)))


def test_failed_evaluation_gets_penalty(truth, ref3):
    sp = ParameterSpace((SpaceEntry("eps_n", 0.5, 1.5),))
    rec = evaluate(sp, truth, ref3, [0.9])
    assert rec.failed and rec.J == PENALTY
    sp_bad = ParameterSpace((SpaceEntry("eps_n", 1.1, 1.5),))
    with pytest.raises(CalibrationError, match="every"):
        calibrate(sp_bad, ref3, budget=2, seed=0, base=truth)


def _small_space(truth):
    return ParameterSpace.around(truth, names=("R0", "D_n"))


def test_budget_equals_n0_is_pure_lhs(truth, ref3):
    sp = _small_space(truth)
    best, hist = calibrate(sp, ref3, budget=4, seed=3, base=truth)
    assert len(hist) == 4
    assert best.J == min(h.J for h in hist)
    with pytest.raises(CalibrationError, match="minimum of 4"):
        calibrate(sp, ref3, budget=3, seed=3, base=truth)


def test_loop_monotone_and_deterministic(truth, ref3):
    sp = _small_space(truth)
    best, hist = calibrate(sp, ref3, budget=12, seed=5, base=truth)
    b = best_so_far(hist)
    assert np.all(np.diff(b) <= 0)
    assert b[-1] == best.J
    assert all(h.J >= 0 for h in hist)
    best2, hist2 = calibrate(sp, ref3, budget=12, seed=5, base=truth)
    assert [h.J for h in hist] == [h.J for h in hist2]
    text = history_csv(hist, sp)
    head = text.splitlines()[0].split(",")
    assert head[:4] == ["iter", "J", "mape_v_3c", "mape_t_3c"] and head[4:6] == ["R0", "D_n"]
    assert len(text.splitlines()) == 13


def test_estimator_wrapper(truth, ref3):
    est = BayesianCalibrator(_small_space(truth), budget=6, seed=1, base_params=truth)
    assert est.get_params()["budget"] == 6
    est.fit(ref3)
    assert est.score(ref3) == pytest.approx(-est.best_record_.J, rel=1e-12)
    csv = overlay_csv(est.best_params_, ref3)
    assert csv.splitlines()[0] == "rate_c,t_s,v_ref,v_sim,temp_ref_k,temp_sim_k"


def test_reference_from_records():
    from battwin.dataio import CycleRecord
    t = np.arange(5.0)
    rec = CycleRecord("C2_00", 0, t, np.array([0, 4, 4, 4, 0.0]), np.full(5, 3.7), np.full(5, 25.0))
    (ref,) = reference_from_records({("C2_00", 0): rec})
    assert ref.rate == 2.0
    np.testing.assert_array_equal(ref.t, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(ref.T, 298.15)
    with pytest.raises(CalibrationError):
        reference_from_records({("C2_00", 0): CycleRecord("C2_00", 0, t, np.zeros(5), t, t)})
