import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.autodiff import Tensor, gradient_check
from bevocc.errors import ConfigError, ShapeError
from bevocc.ss2d import SS2DGroup, cross_merge, cross_scan, direction_order, direction_set, ss2d_group_forward
from bevocc.ssm import SsmParams, s6_forward

M = np.array([[[1.0, 2.0], [3.0, 4.0]]])


@pytest.mark.parametrize(
    "dir_id, expected",
    [(0, [1, 2, 3, 4]), (1, [1, 3, 2, 4]), (2, [4, 3, 2, 1]), (3, [4, 2, 3, 1])],
)
def test_cross_scan_orders(dir_id, expected):
    seq = cross_scan(M, [direction_order(dir_id, 2, 2)])
    assert seq.shape == (1, 4, 1)
    np.testing.assert_array_equal(seq.data[0, :, 0], expected)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), d=st.integers(0, 3))
def test_direction_is_bijection_with_inverse(h, w, d):
    order = direction_order(d, h, w)
    assert sorted(order.perm.tolist()) == list(range(h * w))
    np.testing.assert_array_equal(order.perm[order.inverse], np.arange(h * w))
    np.testing.assert_array_equal(order.inverse[order.perm], np.arange(h * w))


@pytest.mark.parametrize("n_dirs", [1, 4])
@pytest.mark.parametrize("shape", [(1, 2, 2), (3, 4, 5), (2, 1, 7)])
def test_scan_merge_roundtrip(n_dirs, shape):
    rng = np.random.default_rng(0)
    fmap = rng.normal(size=shape)
    dirs = direction_set(n_dirs, *shape[1:])
    merged = cross_merge(cross_scan(fmap, dirs), dirs, *shape[1:])
    np.testing.assert_array_equal(merged.data, n_dirs * fmap)


def test_merge_cancellation():
    dirs = direction_set(4, 2, 2)
    seq = cross_scan(M, dirs).data.copy()
    seq[[0, 2]] *= -1
    np.testing.assert_array_equal(cross_merge(seq, dirs, 2, 2).data, 0.0)


def test_merge_length_mismatch():
    dirs = direction_set(4, 2, 2)
    with pytest.raises(ShapeError):
        cross_merge(np.zeros((4, 5, 1)), dirs, 2, 2)
    with pytest.raises(ShapeError):
        cross_merge(np.zeros((3, 4, 1)), dirs, 2, 2)


def test_invalid_direction_count():
    with pytest.raises(ConfigError):
        direction_set(2, 3, 3)


def _random_group_params(rng, c, n, stack):
    p = SsmParams.init(c, n, rng, stack=stack)
    p.dt_bias.data = rng.normal(0.0, 0.5, size=p.dt_bias.shape)
    p.dt_up.data = rng.normal(0.0, 0.5, size=p.dt_up.shape)
    return p


def test_zero_readout_is_residual_identity():
    fmap = np.random.default_rng(1).normal(size=(3, 4, 4))
    p = SsmParams.zeros(3, 2, stack=(4,), use_d_skip=False)
    pe = np.random.default_rng(2).normal(size=(3, 4, 4))
    out = ss2d_group_forward(fmap, p, pe, 4)
    assert np.array_equal(out.data, fmap)


def test_constant_map_stays_constant():
    group = SS2DGroup(4, 5, 5, np.random.default_rng(3), use_pe=False)
    fmap = np.full((4, 5, 5), 0.7)
    out = group(Tensor(fmap)).data
    np.testing.assert_allclose(out, out[0, 0, 0], atol=1e-15)


def _transform_equivariance(transform, rng):
    fmap = rng.normal(size=(3, 3, 3))
    p = _random_group_params(rng, 3, 2, stack=(1,))
    f = lambda m: ss2d_group_forward(m, p, None, 4).data
    return f(transform(fmap)), transform(f(fmap))


@pytest.mark.parametrize(
    "name, transform",
    [
        ("rot180", lambda m: m[:, ::-1, ::-1].copy()),
        ("transpose", lambda m: m.transpose(0, 2, 1).copy()),
    ],
)
def test_equivariance_under_direction_closed_symmetries(name, transform):
    # both symmetries permute {row, col, reversed row, reversed col} among themselves
    lhs, rhs = _transform_equivariance(transform, np.random.default_rng(4))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_horizontal_flip_is_not_closed_for_this_direction_set():
    # a horizontal flip maps row-major onto "rows left-to-right reversed", which is not a member
    lhs, rhs = _transform_equivariance(lambda m: m[:, :, ::-1].copy(), np.random.default_rng(4))
    assert np.abs(lhs - rhs).max() > 1e-6


def test_per_direction_causality():
    rng = np.random.default_rng(5)
    h, w, c = 3, 4, 2
    p = _random_group_params(rng, c, 3, stack=(4,))
    dirs = direction_set(4, h, w)
    fmap = rng.normal(size=(c, h, w))
    base = s6_forward(cross_scan(fmap, dirs), p).data
    for k, d in enumerate(dirs):
        for j in range(h * w):
            pert = fmap.copy()
            r, col = divmod(int(d.perm[j]), w)
            pert[:, r, col] += 1.0
            out = s6_forward(cross_scan(pert, dirs), p).data
            np.testing.assert_array_equal(out[k, :j], base[k, :j])
            assert np.abs(out[k, j] - base[k, j]).max() > 0


@pytest.mark.parametrize("shape", [(1, 3, 3), (3, 3, 3)])
@pytest.mark.parametrize("n_dirs", [1, 4])
def test_group_gradient(shape, n_dirs):
    rng = np.random.default_rng(6)
    group = SS2DGroup(shape[0], 3, 3, rng, n_state=2, n_dirs=n_dirs)
    group.ssm.dt_bias.data = rng.normal(0.0, 0.5, size=group.ssm.dt_bias.shape)
    for prm in group.parameters():
        prm.data = prm.data + rng.normal(0.0, 0.1, size=prm.shape)
    x = Tensor(rng.normal(size=shape))
    w = rng.normal(size=shape)
    err = gradient_check(lambda x, *_: (group(x) * w).sum(), [x] + group.parameters(), 1e-4)
    assert err < 1e-5


def test_group_accepts_batch_axis():
    rng = np.random.default_rng(7)
    group = SS2DGroup(2, 3, 4, rng)
    x = rng.normal(size=(5, 2, 3, 4))
    batched = group(Tensor(x)).data
    for b in range(5):
        np.testing.assert_allclose(batched[b], group(Tensor(x[b])).data, rtol=1e-13, atol=1e-14)
