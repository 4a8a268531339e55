import numpy as np
import pytest

from iclrnn.errors import DimensionError, NumericError, ParameterError
from iclrnn.model import forward, init_params
from iclrnn.numerics import make_rng
from iclrnn.training import AdamState, Scaler, adam_step, evaluate_mse, predict, split_indices, train

from helpers import small_cfg


def reference_adam(theta, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(theta)
    return out


def test_adam_scalar_trace_matches_reference():
    grads = [0.5, -1.0, 2.0, 0.1, -0.3, 0.0, 1.5, -2.5, 0.7, 0.2]
    expected = reference_adam(1.0, grads)
    state = AdamState(lr=0.01)
    params = {"w": np.array([1.0])}
    for g, e in zip(grads, expected):
        params, state = adam_step(params, {"w": np.array([g])}, state)
        assert abs(params["w"][0] - e) <= 1e-12
    assert state.step == 10


def test_adam_first_step_is_lr_times_sign():
    new, _ = adam_step({"w": np.array([0.0, 0.0])}, {"w": np.array([3.0, -0.01])}, AdamState(lr=0.1))
    np.testing.assert_allclose(new["w"], [-0.1, 0.1], rtol=1e-6)


def test_adam_is_pure_and_checks_shapes():
    p = {"w": np.ones(2)}
    s = AdamState()
    adam_step(p, {"w": np.ones(2)}, s)
    assert s.step == 0 and s.m == {}
    np.testing.assert_array_equal(p["w"], 1.0)
    with pytest.raises(DimensionError):
        adam_step(p, {"w": np.ones(3)}, s)


def test_scaler_roundtrip_and_constant_feature():
    rng = make_rng(0)
    x = rng.normal(3.0, 2.0, (100, 3))
    y = rng.normal(-1.0, 5.0, (100, 2, 2))
    sc = Scaler.fit(x, y)
    np.testing.assert_allclose(sc.denormalize_x(sc.normalize_x(x)), x, atol=1e-12)
    np.testing.assert_allclose(sc.denormalize_y(sc.normalize_y(y)), y, atol=1e-12)
    np.testing.assert_allclose(sc.normalize_x(x).std(axis=0), 1.0, atol=1e-12)
    assert Scaler.from_dict(sc.to_dict()).to_dict() == sc.to_dict()
    with pytest.raises(ParameterError):
        Scaler.fit(np.column_stack([x[:, 0], np.ones(100)]), y)


def test_predict_with_identity_scaler_equals_forward():
    cfg = small_cfg(mode="convex_lipschitz", steps=2)
    p = init_params(cfg)
    x = make_rng(1).standard_normal((3, 2))
    np.testing.assert_array_equal(predict(p, cfg, Scaler.identity(2, 2), x), forward(p, cfg, x))
    with pytest.raises(DimensionError):
        predict(p, cfg, Scaler.identity(3, 2), np.ones((1, 3)))


def test_split_indices_partition():
    tr, va = split_indices(50, 0.2, seed=4)
    assert len(va) == 10 and len(tr) == 40
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(50))


def _toy_problem(n=400):
    rng = make_rng(5)
    x = rng.uniform(-1, 1, (n, 2))
    y = np.maximum(x @ [0.8, 0.3], 0.0)[:, None, None] + 0.1
    return x, y


@pytest.mark.parametrize("mode", ["plain", "convex_lipschitz"])
def test_training_reduces_loss_and_keeps_feasible(mode):
    x, y = _toy_problem()
    cfg = small_cfg(mode=mode, hidden=(8,), steps=1, o=1)
    start = evaluate_mse(init_params(cfg, np.random.Generator(np.random.PCG64(1))), cfg, x, y)

    def feasible(epoch, params, history):
        if mode == "convex_lipschitz":
            assert all(np.all(params.named()[k] >= 0) for k in params.weight_names())

    res = train(x, y, cfg, AdamState(lr=1e-2), epochs=20, batch_size=32, seed=0, callback=feasible)
    assert res.history[-1]["train_mse"] < 0.2 * start
    assert [h["epoch"] for h in res.history] == list(range(1, 21))


def test_training_is_deterministic_for_a_seed():
    x, y = _toy_problem()
    cfg = small_cfg(mode="convex_lipschitz", hidden=(4,), steps=1, o=1)
    a = train(x, y, cfg, epochs=2, seed=3)
    b = train(x, y, cfg, epochs=2, seed=3)
    assert a.history == b.history
    for k, v in a.params.named().items():
        np.testing.assert_array_equal(v, b.params.named()[k])


def test_lr_decay_schedule():
    x, y = _toy_problem(64)
    cfg = small_cfg(hidden=(2,), steps=1, o=1)
    res = train(x, y, cfg, AdamState(lr=0.1), epochs=3, lr_decay=0.5)
    assert [h["lr"] for h in res.history] == [0.1, 0.05, 0.025]


def test_explicit_validation_set():
    x, y = _toy_problem(100)
    cfg = small_cfg(hidden=(2,), steps=1, o=1)
    res = train(x[:80], y[:80], cfg, epochs=1, validation=(x[80:], y[80:]))
    assert len(res.train_index) == 80 and res.val_index is None
    assert res.history[0]["val_mse"] == pytest.approx(evaluate_mse(res.params, cfg, x[80:], y[80:]))


def test_divergence_reports_epoch():
    x, y = _toy_problem(64)
    y = y * 1e200
    cfg = small_cfg(hidden=(2,), steps=1, o=1)
    with pytest.raises(NumericError) as e:
        with np.errstate(all="ignore"):
            train(x, y, cfg, AdamState(lr=1.0), epochs=3)
    assert e.value.epoch == 1
