import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iclrnn.constraints import (
    ProjectionConfig,
    bjorck_orthonormalize,
    clip_nonnegative,
    numerical_rank,
    power_iteration,
    project_iclrnn,
    spectral_normalize,
    svd_oracle,
)
from iclrnn.errors import ParameterError, PreconditionError, ScaleError
from iclrnn.numerics import make_rng

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def mats(max_side=8):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_config_validation():
    with pytest.raises(ParameterError):
        ProjectionConfig(bjorck_beta=0.0)
    with pytest.raises(ParameterError):
        ProjectionConfig(power_iters=0)
    ProjectionConfig(clip_enabled=False, spectral_enabled=False)


def test_power_iteration_diagonal():
    rep = power_iteration(np.diag([3.0, 1.0]))
    assert rep.converged
    assert abs(rep.sigma_max - 3.0) < 1e-9


def test_power_iteration_zero_matrix():
    rep = power_iteration(np.zeros((3, 2)))
    assert rep.sigma_max == 0.0 and rep.converged


def test_power_iteration_repeated_top_singular_value():
    q, _ = np.linalg.qr(make_rng(1).standard_normal((5, 5)))
    rep = power_iteration(q * 2.0)
    assert abs(rep.sigma_max - 2.0) < 1e-9


def test_power_iteration_agrees_with_jacobi_oracle():
    a = make_rng(2).standard_normal((7, 4))
    assert abs(power_iteration(a, ProjectionConfig(power_iters=500)).sigma_max - svd_oracle(a)[0]) < 1e-7


def test_spectral_normalize_scales_up_as_well_as_down():
    for scale in (0.1, 10.0):
        a = scale * make_rng(3).standard_normal((6, 6))
        assert abs(svd_oracle(spectral_normalize(a))[0] - 1.0) < 1e-6


def test_bjorck_scalar_recursion():
    # a_{k+1} = 1.5 a_k - 0.5 a_k^3 from a_0 = 0.5
    seq = [0.5]
    for _ in range(10):
        seq.append(1.5 * seq[-1] - 0.5 * seq[-1] ** 3)
    assert seq[1] == 0.6875
    assert abs(seq[2] - 0.8687744140625) < 1e-15
    for k in (1, 2, 10):
        got = bjorck_orthonormalize(np.array([[0.5]]), ProjectionConfig(bjorck_iters=k))[0, 0]
        assert got == pytest.approx(seq[k], abs=1e-15)
    assert abs(seq[10] - 1.0) < 1e-6


def test_bjorck_rejects_large_inputs():
    with pytest.raises(PreconditionError):
        bjorck_orthonormalize(np.array([[2.0]]))


def test_bjorck_fixed_point_on_orthogonal():
    q, _ = np.linalg.qr(make_rng(4).standard_normal((4, 4)))
    np.testing.assert_allclose(bjorck_orthonormalize(q), q, atol=1e-12)


def test_clip_of_rotation_has_closed_form_norm():
    c = np.sqrt(2) / 2
    rot = np.array([[c, -c], [c, c]])
    b = clip_nonnegative(rot)
    np.testing.assert_array_equal(b, [[c, 0.0], [c, c]])
    expected = c * np.sqrt((3 + np.sqrt(5)) / 2)
    assert abs(svd_oracle(b)[0] - expected) < 1e-12
    assert abs(expected - 1.1441228056353687) < 1e-12
    assert expected <= np.sqrt(2)


def test_clip_nonnegative_fixed_point_and_total():
    a = np.abs(make_rng(5).standard_normal((3, 4)))
    np.testing.assert_array_equal(clip_nonnegative(a), a)
    np.testing.assert_array_equal(clip_nonnegative(-a), np.zeros_like(a))


def test_project_all_negative_rank_one_gives_zero():
    # orthonormalization keeps a rank-1 matrix's direction, so the signs survive to the clip
    for a in (-np.ones((3, 3)), -np.outer([1.0, 2.0], [3.0, 1.0, 0.5])):
        out = project_iclrnn(a)
        assert not np.any(out)
        assert power_iteration(out).sigma_max == 0.0


def test_power_iteration_extreme_scales():
    for s in (1e-150, 1e150):
        a = np.full((1, 4), s)
        assert power_iteration(a).sigma_max == pytest.approx(2 * s, rel=1e-12)


def test_project_nonnegative_orthonormal_rows_unchanged():
    perm = np.eye(4)[[2, 0, 3, 1]]
    np.testing.assert_allclose(project_iclrnn(perm), perm, atol=1e-6)
    wide = np.zeros((2, 5))
    wide[0, 1] = wide[1, 3] = 1.0
    np.testing.assert_allclose(project_iclrnn(wide), wide, atol=1e-6)


def test_project_stage_switches():
    a = make_rng(6).standard_normal((5, 5))
    np.testing.assert_array_equal(project_iclrnn(a, ProjectionConfig(spectral_enabled=False)), np.maximum(a, 0))
    np.testing.assert_array_equal(project_iclrnn(a, ProjectionConfig(False, False) if False else
                                                 ProjectionConfig(clip_enabled=False, spectral_enabled=False)), a)
    lip = project_iclrnn(a, ProjectionConfig(clip_enabled=False))
    np.testing.assert_allclose(svd_oracle(lip), np.ones(5), atol=1e-3)


def test_project_random_8x8_bound_against_rank():
    rng = make_rng(7)
    for _ in range(20):
        a = rng.standard_normal((8, 8))
        pre = bjorck_orthonormalize(spectral_normalize(a))
        r = numerical_rank(svd_oracle(pre))
        s = svd_oracle(project_iclrnn(a))[0]
        assert s <= np.sqrt(8) + 1e-6
        assert s <= np.sqrt(r) + 1e-6


def test_svd_oracle_matches_lapack():
    a = make_rng(8).standard_normal((9, 5))
    np.testing.assert_allclose(svd_oracle(a), np.linalg.svd(a, compute_uv=False), rtol=1e-12)
    np.testing.assert_allclose(svd_oracle(a.T), np.linalg.svd(a, compute_uv=False), rtol=1e-12)


def test_svd_oracle_refuses_large_inputs():
    with pytest.raises(ScaleError):
        svd_oracle(np.ones((65, 65)))


def test_numerical_rank():
    assert numerical_rank([3.0, 1.0, 1e-13]) == 2
    assert numerical_rank([0.0, 0.0]) == 0
    a = make_rng(9).standard_normal((6, 2)) @ make_rng(10).standard_normal((2, 6))
    assert numerical_rank(svd_oracle(a)) == 2


@settings(max_examples=200, deadline=None)
@given(mats())
def test_clip_never_increases_frobenius(a):
    assert np.sum(clip_nonnegative(a) ** 2) <= np.sum(a**2)


@settings(max_examples=150, deadline=None)
@given(mats())
def test_projection_is_nonnegative_and_bounded(a):
    out = project_iclrnn(a)
    assert np.all(out >= 0)
    m, n = a.shape
    assert svd_oracle(out)[0] <= np.sqrt(min(m, n)) + 1e-6


@settings(max_examples=100, deadline=None)
@given(mats())
def test_spectral_normalize_then_bjorck_bounded_by_one(a):
    out = bjorck_orthonormalize(spectral_normalize(a))
    if np.any(out):
        assert svd_oracle(out)[0] <= 1.0 + 1e-6
