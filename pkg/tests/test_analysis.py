import numpy as np
import pytest

from iclrnn.analysis import (
    check_convexity,
    check_convexity_triple,
    check_monotone,
    count_flops,
    empirical_lipschitz,
    lipschitz_bound,
    lipschitz_report,
    network_function,
    noise_sweep,
)
from iclrnn.errors import ParameterError
from iclrnn.model import ConstraintMode, NetConfig, init_params
from iclrnn.numerics import make_rng

from helpers import small_cfg, tiny_params


def concave_scalar():
    # y = -relu(x): one negative output weight
    cfg = NetConfig(1, 1, hidden_dims=(1,), rollout_steps=1, constraint_mode="plain")
    return network_function(tiny_params(wh=((0.0,),), wy=((-1.0,),)), cfg)


def test_concave_counterexample_detected_at_known_triple():
    f = concave_scalar()
    # f(0) = 0 > 0.5 f(-1) + 0.5 f(1) = -0.5
    assert check_convexity_triple(f, [[-1.0]], [[1.0]], 0.5) == pytest.approx(0.5)
    rep = check_convexity(f, ([-1.0], [1.0]), samples=1000, rng=make_rng(0))
    assert rep.violations > 0 and not rep.passed


@pytest.mark.parametrize("mode", ["convex_only", "convex_lipschitz"])
def test_structurally_convex_models_pass(mode):
    cfg = small_cfg(mode=mode, hidden=(8, 8), steps=3, d=3, o=2)
    p = init_params(cfg, make_rng(1))
    for layer in p.layers:
        layer.bh[:] = make_rng(2).standard_normal(layer.bh.shape)
    f = network_function(p, cfg)
    rep = check_convexity(f, (-3 * np.ones(3), 3 * np.ones(3)), samples=10_000, tol=1e-6, rng=make_rng(3))
    assert rep.violations == 0 and rep.triples_tested == 10_000
    assert check_monotone(f, (-3 * np.ones(3), 3 * np.ones(3)), rng=make_rng(4)) == 0


def test_plain_models_usually_fail_convexity():
    cfg = small_cfg(mode="plain", hidden=(16,), steps=1, d=2, o=1)
    p = init_params(cfg, make_rng(5))
    p.layers[0].bh[:] = make_rng(6).standard_normal(16)
    rep = check_convexity(network_function(p, cfg), (-3 * np.ones(2), 3 * np.ones(2)), rng=make_rng(7))
    assert rep.violations > 0


def test_convexity_rejects_bad_domain():
    with pytest.raises(ParameterError):
        check_convexity(concave_scalar(), ([1.0], [-1.0]))


def test_linear_map_lipschitz_is_its_spectral_norm():
    a = np.array([[3.0, 0.0], [0.0, 1.0]])
    L = empirical_lipschitz(lambda x: x @ a.T, (-np.ones(2), np.ones(2)), pairs=4000, rng=make_rng(8))
    assert 2.9 < L <= 3.0 + 1e-12


def test_bound_scalar_recursion_by_hand():
    # a = 1, b = 0.5, c = 1, T = 3: K_t = 1, 1.5, 1.75, stacked sqrt(1 + 2.25 + 3.0625)
    cfg = NetConfig(1, 1, hidden_dims=(1,), rollout_steps=3, constraint_mode="plain")
    assert lipschitz_bound(tiny_params(), cfg) == pytest.approx(np.sqrt(1 + 2.25 + 3.0625))


@pytest.mark.parametrize("mode", list(ConstraintMode))
@pytest.mark.parametrize("steps", [1, 4])
def test_empirical_below_bound(mode, steps):
    cfg = small_cfg(mode=mode, hidden=(6, 5), steps=steps, d=3, o=2)
    p = init_params(cfg, make_rng(9))
    rep = lipschitz_report(p, cfg, (-2 * np.ones(3), 2 * np.ones(3)), pairs=3000, rng=make_rng(10))
    assert rep.empirical_L <= rep.theoretical_bound + 1e-9


def test_single_step_single_layer_bound_composes_rank_bounds():
    rng = make_rng(11)
    for h, d, o in [(8, 3, 2), (5, 5, 5), (16, 4, 1)]:
        cfg = small_cfg(mode="convex_lipschitz", hidden=(h,), steps=1, d=d, o=o)
        p = init_params(cfg, rng)
        limit = np.sqrt(min(h, d)) * np.sqrt(min(o, h)) * np.sqrt(min(h, h))
        assert lipschitz_bound(p, cfg) <= limit + 1e-6


def test_flops_worked_example():
    # D=2, H=3, O=1, n=1: 2*3*2 + 2*3*3 + 3 + 3 + 3 (hidden) + 2*1*3 + 1 (output) = 46
    assert count_flops(NetConfig(2, 1, hidden_dims=(3,), rollout_steps=1)) == 46
    assert count_flops(NetConfig(2, 1, hidden_dims=(3,), rollout_steps=5)) == 230
    assert count_flops(NetConfig(2, 4, hidden_dims=(3,), output_activation="softmax")) == 39 + 2 * 4 * 3 + 4 + 12


def test_flops_independent_of_constraint_mode():
    for hidden in [(64, 64), (7,), (3, 9, 4)]:
        counts = {count_flops(NetConfig(4, 2, hidden_dims=hidden, rollout_steps=3, constraint_mode=m))
                  for m in ConstraintMode}
        assert len(counts) == 1


def test_noise_sweep_zero_sigma_is_clean_and_worker_invariant():
    cfg = small_cfg(mode="convex_lipschitz", hidden=(6,), steps=1, d=3, o=2)
    p = init_params(cfg, make_rng(12))
    f = network_function(p, cfg)
    x = make_rng(13).standard_normal((200, 3))
    y = f(x)[:, 0] + 0.01
    a = noise_sweep(f, x, y, trials=3, seed=4)
    b = noise_sweep(f, x, y, trials=3, seed=4, workers=3)
    assert a == b
    assert a.mean_mse[0] == pytest.approx(1e-4) and a.std_mse[0] == 0.0
    assert a.mean_mse[-1] > a.mean_mse[0]
    assert a.degradation() == a.mean_mse[-1] - a.mean_mse[0]
    assert noise_sweep(f, x, y, trials=3, seed=5) != a
    with pytest.raises(ParameterError):
        noise_sweep(f, x[:0], y[:0])
