import numpy as np
import pytest

from iclrnn.constraints import svd_oracle
from iclrnn.errors import DimensionError, NumericError, ParameterError
from iclrnn.model import (
    CellParams,
    ConstraintMode,
    NetConfig,
    bptt_gradients,
    forward,
    init_params,
    mse_loss_and_grad,
    project_params,
)
from iclrnn.numerics import make_rng

from helpers import fd_gradients, rel_error, small_cfg, tiny_params


def test_scalar_rollout_by_hand():
    # h_t = relu(x + 0.5 h_{t-1}), y_t = h_t: 1, 1.5, 1.75
    cfg = NetConfig(1, 1, hidden_dims=(1,), rollout_steps=3, constraint_mode="plain")
    y = forward(tiny_params(), cfg, np.array([1.0]))
    np.testing.assert_allclose(y[:, 0], [1.0, 1.5, 1.75], rtol=0, atol=1e-15)


def test_relu_blocks_negative_drive():
    cfg = NetConfig(1, 1, hidden_dims=(1,), rollout_steps=2, constraint_mode="plain")
    p = tiny_params(by=(0.25,))
    np.testing.assert_array_equal(forward(p, cfg, np.array([-2.0]))[:, 0], [0.25, 0.25])


def test_output_shapes_and_batching():
    cfg = small_cfg(steps=4)
    p = init_params(cfg)
    x = make_rng(0).standard_normal((5, 2))
    y = forward(p, cfg, x)
    assert y.shape == (5, 4, 2)
    np.testing.assert_allclose(forward(p, cfg, x[2]), y[2], atol=1e-15)
    assert forward(p, cfg, x, steps=7).shape == (5, 7, 2)


def test_repeat_vector_equals_sequence_of_copies():
    cfg = small_cfg(mode="convex_lipschitz", hidden=(4, 3), steps=5)
    p = init_params(cfg)
    x = make_rng(1).standard_normal((3, 2))
    seq = np.repeat(x[:, None, :], 5, axis=1)
    np.testing.assert_allclose(forward(p, cfg, x), forward(p, cfg, seq), atol=1e-14)


def test_softmax_head_sums_to_one():
    cfg = small_cfg(out="softmax", o=3)
    y = forward(init_params(cfg), cfg, make_rng(2).standard_normal((4, 2)))
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-14)
    assert np.all(y > 0)


def test_dimension_and_finiteness_checks():
    cfg = small_cfg()
    p = init_params(cfg)
    with pytest.raises(DimensionError):
        forward(p, cfg, np.ones(3))
    with pytest.raises(NumericError):
        forward(p, cfg, np.array([np.nan, 0.0]))


def test_overflow_reports_step():
    cfg = NetConfig(1, 1, hidden_dims=(1,), rollout_steps=10, constraint_mode="plain")
    p = tiny_params(wx=((1e300,),), wh=((1e300,),))
    with pytest.raises(NumericError) as e:
        with np.errstate(over="ignore", invalid="ignore"):
            forward(p, cfg, np.array([1.0]))
    assert e.value.step == 2


def test_config_validation_and_roundtrip():
    with pytest.raises(ParameterError):
        NetConfig(2, 1, hidden_activation="tanh")
    with pytest.raises(ParameterError):
        NetConfig(2, 1, rollout_steps=0)
    with pytest.raises(ValueError):
        NetConfig(2, 1, constraint_mode="strict")
    cfg = NetConfig(3, 2, hidden_dims=(5, 4), rollout_steps=2, constraint_mode="lipschitz_only", seed=9)
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("mode", list(ConstraintMode))
def test_init_is_feasible_for_mode(mode):
    cfg = small_cfg(mode=mode, hidden=(6, 5), d=4)
    p = init_params(cfg, make_rng(3))
    for name in p.weight_names():
        w = p.named()[name]
        if mode.convex:
            assert np.all(w >= 0), name
        if mode is ConstraintMode.LIPSCHITZ_ONLY:
            np.testing.assert_allclose(svd_oracle(w), 1.0, atol=1e-3)
        if mode is ConstraintMode.CONVEX_LIPSCHITZ:
            assert svd_oracle(w)[0] <= np.sqrt(min(w.shape)) + 1e-6
    if mode is ConstraintMode.CONVEX_LIPSCHITZ:
        return  # clipping moves singular values off 1, so a second pass renormalizes
    again = project_params(p, cfg)
    for name in p.weight_names():
        np.testing.assert_allclose(again.named()[name], p.named()[name], atol=1e-6)


def test_plain_projection_is_identity():
    cfg = small_cfg()
    p = init_params(cfg)
    assert project_params(p, cfg) is p


def test_params_named_roundtrip_and_shape_check():
    cfg = small_cfg(hidden=(3, 2))
    p = init_params(cfg)
    q = CellParams.from_named(p.copy().named())
    for k, v in p.named().items():
        np.testing.assert_array_equal(q.named()[k], v)
    q.layers[1].Wh = np.zeros((3, 3))
    with pytest.raises(DimensionError):
        q.check_shapes(cfg)


def test_mse_on_final_steps_only():
    out = np.zeros((2, 3, 1))
    out[:, -1, 0] = 1.0
    loss, grad = mse_loss_and_grad(out, np.zeros((2, 1)))
    assert loss == 1.0
    assert np.all(grad[:, :2] == 0) and np.all(grad[:, 2] == 1.0)
    with pytest.raises(DimensionError):
        mse_loss_and_grad(out, np.zeros((2, 4, 1)))


@pytest.mark.parametrize("mode", ["plain", "convex_lipschitz"])
@pytest.mark.parametrize("steps", [1, 4])
def test_bptt_matches_finite_differences(mode, steps):
    cfg = small_cfg(mode=mode, hidden=(3, 2), steps=steps, d=2, o=2)
    rng = make_rng(10 + steps)
    p = init_params(cfg, rng)
    for layer in p.layers:
        layer.bh += 0.3  # keep units away from the ReLU kink
    x = rng.standard_normal((4, 2))
    y = rng.standard_normal((4, steps, 2))
    _, g = bptt_gradients(p, cfg, x, y)
    assert rel_error(g, fd_gradients(p, cfg, x, y)) <= 1e-5


def test_bptt_sequence_input_and_softmax():
    cfg = small_cfg(hidden=(4,), steps=3, o=3, out="softmax")
    rng = make_rng(20)
    p = init_params(cfg, rng)
    p.layers[0].bh += 0.2
    x = rng.standard_normal((3, 3, 2))
    y = rng.uniform(size=(3, 2, 3))
    _, g = bptt_gradients(p, cfg, x, y)
    assert rel_error(g, fd_gradients(p, cfg, x, y)) <= 1e-5


def test_relu_subgradient_at_zero_is_zero():
    cfg = NetConfig(1, 1, hidden_dims=(1,), rollout_steps=1, constraint_mode="plain")
    p = tiny_params()
    _, g = bptt_gradients(p, cfg, np.array([[0.0]]), np.array([[1.0]]))
    assert g["Wx0"][0, 0] == 0.0 and g["bh0"][0] == 0.0
