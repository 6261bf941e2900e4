import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from battwin.pinn import (OUT_LO, OUT_SPAN, SohPinnRegressor, TrainingError, family_mape, fit_fade, forward,
                          init_layers, mape, pinn_loss, predictions_csv, track_mape)

SIZES = [13, 64, 64, 1]


def _batch(seed=0, n=32, m=16):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 13))
    y = rng.uniform(0.8, 1.0, n)
    Xc = rng.standard_normal((m, 13))
    v = np.zeros(13)
    v[12] = 1.0 / 0.29
    colloc = (Xc, v, np.full(m, 300.0), rng.random(m))
    return X, y, colloc


def test_zero_output_midpoint():
    layers = init_layers(SIZES, 0, zero_output=True)
    f = forward(layers, np.random.default_rng(1).standard_normal((7, 13)))["f"]
    np.testing.assert_array_equal(f, 0.775)


@given(st.integers(0, 1000))
def test_output_bounds_for_large_inputs(seed):
    rng = np.random.default_rng(seed)
    layers = init_layers(SIZES, seed)
    f = forward(layers, 1e3 * rng.standard_normal((20, 13)))["f"]
    assert np.all(f >= OUT_LO) and np.all(f <= OUT_LO + OUT_SPAN)


def test_forward_bit_identical():
    X = np.random.default_rng(2).standard_normal((5, 13))
    a = forward(init_layers(SIZES, 9), X)["f"]
    b = forward(init_layers(SIZES, 9), X)["f"]
    assert a.tobytes() == b.tobytes()


def test_input_derivative_matches_fd():
    layers = init_layers(SIZES, 3)
    X, _, (Xc, v, _, _) = _batch(1)
    d = forward(layers, Xc, v)["df"]
    h = 1e-4
    fd = (forward(layers, Xc + h * v)["f"] - forward(layers, Xc - h * v)["f"]) / (2 * h)
    np.testing.assert_allclose(d, fd, rtol=1e-4, atol=1e-10)


def _perturbed(layers, li, which, idx, delta):
    out = [(W.copy(), b.copy()) for W, b in layers]
    out[li][which][idx] += delta
    return out


def test_gradient_check_20_weights():
    layers = init_layers(SIZES, 4)
    X, y, colloc = _batch(2)
    fade = (0.012, 2.5e-4)
    _, _, _, _, grads = pinn_loss(layers, X, y, colloc, 1.0, 0.1, fade)
    rng = np.random.default_rng(5)
    h = 1e-5
    errs = []
    for _ in range(20):
        li = int(rng.integers(len(layers)))
        which = int(rng.integers(2))
        shape = layers[li][which].shape
        idx = tuple(int(rng.integers(s)) for s in shape)
        lp = pinn_loss(_perturbed(layers, li, which, idx, h), X, y, colloc, 1.0, 0.1, fade, with_grad=False)[0]
        lm = pinn_loss(_perturbed(layers, li, which, idx, -h), X, y, colloc, 1.0, 0.1, fade, with_grad=False)[0]
        fd = (lp - lm) / (2 * h)
        an = grads[li][which][idx]
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert max(errs) <= 1e-4


def test_loss_decomposition_and_reductions():
    layers = init_layers(SIZES, 6)
    X, y, colloc = _batch(3)
    total, data, mono, phys, _ = pinn_loss(layers, X, y, colloc, 0.7, 0.3, (0.01, 1e-4))
    assert total == data + 0.7 * mono + 0.3 * phys
    t0, d0, *_ = pinn_loss(layers, X, y, colloc, 0.0, 0.0)
    f = forward(layers, X)["f"]
    assert t0 == d0 == pytest.approx(np.mean((f - y) ** 2), rel=1e-14)


def test_constant_model_on_constant_labels():
    layers = init_layers(SIZES, 0, zero_output=True)
    X, _, _ = _batch(4)
    _, data, *_ = pinn_loss(layers, X, np.full(len(X), 0.775), None)
    assert data == 0.0


def test_mono_activates_for_increasing_model():
    layers = init_layers([13, 1], 0, zero_output=True)
    layers[0][0][12, 0] = 1.0
    X, y, colloc = _batch(5)
    _, _, mono, _, _ = pinn_loss(layers, X, y, colloc)
    assert mono > 0
    layers[0][0][12, 0] = -1.0
    assert pinn_loss(layers, X, y, colloc)[2] == 0.0


def test_fit_fade_recovers_coefficients():
    n = np.arange(1, 301)
    soh = 1 - (0.012 * np.sqrt(n) + 2.5e-4 * n) / 2.0
    b1, b2 = fit_fade(n, soh)
    assert b1 == pytest.approx(0.012, rel=1e-9) and b2 == pytest.approx(2.5e-4, rel=1e-9)


def test_linear_toy_converges():
    x = np.linspace(-1, 1, 120)[:, None]
    y = 0.8 + 0.1 * x[:, 0]
    model = SohPinnRegressor(hidden_sizes=(16,), cycle_index=None, epochs=300, seed=0).fit(x, y)
    assert np.mean((model.predict(x) - y) ** 2) <= 1e-3
    assert model.loss_log_[-1, 0] < 0.5 * model.loss_log_[0, 0]


def _synthetic_fleet(seed=0):
    rng = np.random.default_rng(seed)
    rows, soh = [], []
    for cell in range(4):
        a = rng.uniform(0.8, 1.2)
        for n in range(60):
            s = 1 - a * (0.012 * np.sqrt(n) + 2.5e-4 * n) / 2.0
            f = rng.normal(0, 1e-3, 13)
            f[0] = 2 * s
            f[1] = 7.2 * s
            f[12] = n / 59
            rows.append(f)
            soh.append(s)
    return np.array(rows), np.array(soh)


def test_seeded_training_deterministic_and_accurate():
    X, y = _synthetic_fleet()
    kw = dict(epochs=150, seed=3, hidden_sizes=(16, 16))
    a = SohPinnRegressor(**kw).fit(X, y, max_cycle=59)
    b = SohPinnRegressor(**kw).fit(X, y, max_cycle=59)
    for (Wa, ba), (Wb, bb) in zip(a.layers_, b.layers_):
        assert Wa.tobytes() == Wb.tobytes() and ba.tobytes() == bb.tobytes()
    assert mape(y, a.predict(X)) < 3.0
    assert a.loss_log_.shape == (150, 4)


def test_save_load_roundtrip(tmp_path):
    X, y = _synthetic_fleet(1)
    m = SohPinnRegressor(epochs=3, seed=1, hidden_sizes=(8,)).fit(X, y, max_cycle=59)
    m.save(tmp_path / "m.json", comments=("seed=1",), extra={"k": 1})
    assert (tmp_path / "m.json").read_text().startswith("# seed=1")
    back = SohPinnRegressor.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.predict(X), m.predict(X))
    assert back.get_params() == m.get_params()
    with pytest.raises(ValueError, match="13 features"):
        back.predict(X[:, :5])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_validation():
    X, y = _synthetic_fleet()
    with pytest.raises(ValueError, match="at least 100"):
        SohPinnRegressor().fit(X[:50], y[:50])
    with pytest.raises(ValueError):
        SohPinnRegressor(lambda_mono=-1).fit(X, y)
    with pytest.raises(TrainingError) as exc:
        SohPinnRegressor(learning_rate=np.inf, epochs=2).fit(X, y, max_cycle=59)
    assert exc.value.epoch == 1 or exc.value.epoch == 2


def test_mape_helpers():
    y = np.linspace(0.8, 1.0, 10)
    assert mape(y, y) == 0.0
    assert mape(y, 0.97 * y) == pytest.approx(3.0, abs=1e-12)
    ids = ["C2_00"] * 5 + ["RW_01"] * 5
    assert set(family_mape(ids, y, y)) == {"C2", "RW"}
    assert list(track_mape(ids, y, 0.97 * y).values()) == pytest.approx([3.0, 3.0])
    csv = predictions_csv(ids, range(10), y, y)
    assert csv.splitlines()[0] == "cell_id,cycle,soh_pred,soh_true"
