import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevocc.autodiff import Tensor, gradient_check
from bevocc.errors import ConfigError, ShapeError
from bevocc.nn import Linear
from bevocc.view_transform import (
    FULL_SCALE_GRID,
    BevGridSpec,
    CameraModel,
    frustum_points,
    frustum_to_ego,
    lift,
    predict_depth_distribution,
    voxel_pool,
)

UNIT_K = np.eye(3)


def _rot(yaw, pitch=0.0):
    cy, sy, cp, sp = np.cos(yaw), np.sin(yaw), np.cos(pitch), np.sin(pitch)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return rz @ rx


def _camera(rng, d=6):
    """Forward-ish looking camera with random pose; camera z maps to ego x."""
    cam_to_ego_axes = np.array([[0, 0, 1], [-1, 0, 0], [0, -1, 0]], dtype=float)
    T = np.eye(4)
    T[:3, :3] = _rot(rng.uniform(-np.pi, np.pi), rng.uniform(-0.2, 0.2)) @ cam_to_ego_axes
    T[:3, 3] = rng.uniform(-1, 1, 3)
    K = np.array([[rng.uniform(4, 12), 0, rng.uniform(3, 5)], [0, rng.uniform(4, 12), rng.uniform(3, 5)], [0, 0, 1]])
    return CameraModel(K, T, np.sort(rng.uniform(0.5, 8.0, d)) + np.arange(d) * 1e-3)


def test_full_scale_grid_shape():
    assert FULL_SCALE_GRID.shape == (200, 200, 16)


@pytest.mark.parametrize("kwargs", [{"cell": 0.3}, {"cell": 0.0}, {"x_range": (1.0, 1.0)}])
def test_grid_rejects_non_integral(kwargs):
    with pytest.raises(ConfigError):
        BevGridSpec(**kwargs)


def test_camera_validation():
    with pytest.raises(ConfigError):
        CameraModel(np.diag([0.0, 1.0, 1.0]), np.eye(4))
    bad = np.eye(4)
    bad[0, 1] = 1e-6
    with pytest.raises(ConfigError):
        CameraModel(UNIT_K, bad)
    with pytest.raises(ConfigError):
        CameraModel(UNIT_K, np.eye(4), depth_bins=[1.0, 1.0, 2.0])
    with pytest.raises(ConfigError):
        CameraModel(UNIT_K, np.eye(4), depth_bins=[-1.0, 2.0])


def test_depth_distribution_uniform_and_saturated():
    proj = Linear(3, 4, np.random.default_rng(0))
    proj.weight.data[:] = 0.0
    p = predict_depth_distribution(np.ones((3, 2, 2)), proj).data
    np.testing.assert_allclose(p, 0.25, rtol=0, atol=1e-15)
    proj.bias.data[2] = 20.0
    p = predict_depth_distribution(np.ones((3, 2, 2)), proj).data
    assert np.all(p[2] > 1 - 1e-8)


def test_depth_distribution_normalized():
    rng = np.random.default_rng(1)
    proj = Linear(5, 7, rng)
    p = predict_depth_distribution(rng.normal(size=(5, 3, 4)) * 10, proj).data
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)


def test_lift_examples():
    rng = np.random.default_rng(2)
    feat = rng.normal(size=(3, 2, 2))
    depth = np.zeros((4, 2, 2))
    depth[1] = 1.0
    fr = lift(feat, depth).data
    assert fr.shape == (4, 3, 2, 2)
    np.testing.assert_array_equal(fr[1], feat)
    assert not fr[[0, 2, 3]].any()
    np.testing.assert_array_equal(lift(np.full((2, 1, 1), 2.0), np.full((4, 1, 1), 0.25)).data, 0.5)
    soft = np.exp(rng.normal(size=(4, 2, 2)))
    soft /= soft.sum(axis=0)
    np.testing.assert_allclose(lift(feat, soft).data.sum(axis=0), feat, rtol=1e-14)


def test_lift_shape_mismatch():
    with pytest.raises(ShapeError):
        lift(np.zeros((3, 2, 2)), np.zeros((4, 2, 3)))


def test_frustum_to_ego_examples():
    cam = CameraModel(UNIT_K, np.eye(4), [5.0])
    np.testing.assert_array_equal(frustum_to_ego(cam, 0, 0, 5.0), [0, 0, 5])
    np.testing.assert_array_equal(frustum_to_ego(cam, 2, 0, 5.0), [10, 0, 5])
    T = np.eye(4)
    T[:3, 3] = [1, 2, 3]
    np.testing.assert_array_equal(frustum_to_ego(CameraModel(UNIT_K, T, [5.0]), 2, 0, 5.0), [11, 2, 8])


def test_frustum_stride_maps_to_block_centres():
    cam = CameraModel(UNIT_K, np.eye(4), [1.0])
    # feature pixel 0 at stride 4 covers image pixels 0..3, centre 1.5
    np.testing.assert_allclose(frustum_to_ego(cam, 0, 1, 1.0, stride=4), [1.5, 5.5, 1.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_projection_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = _camera(rng)
    u, v, d = rng.uniform(-5, 20, 10), rng.uniform(-5, 20, 10), rng.uniform(0.5, 30, 10)
    pu, pv, pd = cam.project(frustum_to_ego(cam, u, v, d))
    np.testing.assert_allclose(pu, u, atol=1e-9, rtol=0)
    np.testing.assert_allclose(pv, v, atol=1e-9, rtol=0)
    np.testing.assert_allclose(pd, d, atol=1e-9, rtol=0)


def test_single_point_cell_index():
    idx, valid = FULL_SCALE_GRID.cell_index(np.array([0.2, 0.2, 0.0]))
    assert valid and tuple(idx[:2]) == (100, 100)


def _pool_single(points, values, grid):
    """Pool handcrafted ego points by building cameras whose frusta hit them."""
    cams, frusta = [], []
    for p, val in zip(points, values):
        T = np.eye(4)
        T[:3, 3] = np.asarray(p) - [0.0, 0.0, 1.0]
        cams.append(CameraModel(UNIT_K, T, [1.0]))
        frusta.append(np.full((1, 1, 1, 1), float(val)))
    return voxel_pool(np.stack(frusta), cams, grid).data


def test_pool_single_point_full_scale_grid():
    bev = _pool_single([(0.2, 0.2, 0.0)], [7.0], FULL_SCALE_GRID)
    assert bev.shape == (1, 200, 200)
    assert bev[0, 100, 100] == 7.0 and bev.sum() == 7.0


def test_pool_sum_in_same_cell():
    bev = _pool_single([(0.1, 0.1, 0.0), (0.3, 0.2, 1.0)], [3.0, 4.0], FULL_SCALE_GRID)
    assert bev[0, 100, 100] == 7.0


def test_pool_drops_out_of_range_including_height():
    bev = _pool_single([(50.0, 0.0, 0.0), (0.0, 0.0, 9.0), (0.0, -41.0, 0.0)], [1.0, 2.0, 3.0], FULL_SCALE_GRID)
    assert not bev.any()


def _random_rig(rng, n_views=2, d=6, h=5, w=6):
    grid = BevGridSpec((-4.0, 4.0), (-4.0, 4.0), (-1.0, 3.0), 1.0)
    cams = [_camera(rng, d) for _ in range(n_views)]
    frusta = rng.normal(size=(n_views, d, 3, h, w))
    return grid, cams, frusta


def test_pool_mass_conservation_and_order_invariance():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        grid, cams, frusta = _random_rig(rng)
        bev = voxel_pool(frusta, cams, grid).data
        pts = np.stack([frustum_points(c, 5, 6, 1) for c in cams])
        _, valid = grid.cell_index(pts)
        inside_mass = (frusta.transpose(0, 1, 3, 4, 2)[valid]).sum(axis=0)
        np.testing.assert_allclose(bev.sum(axis=(1, 2)), inside_mass, atol=1e-9, rtol=0)
        # reversing view order changes accumulation order only
        rev = voxel_pool(frusta[::-1].copy(), cams[::-1], grid).data
        np.testing.assert_allclose(rev, bev, atol=1e-12, rtol=0)


def test_pool_is_deterministic():
    grid, cams, frusta = _random_rig(np.random.default_rng(3))
    a = voxel_pool(frusta, cams, grid).data
    b = voxel_pool(frusta, cams, grid).data
    assert a.tobytes() == b.tobytes()


def test_pool_shape_errors():
    grid, cams, frusta = _random_rig(np.random.default_rng(4))
    with pytest.raises(ShapeError):
        voxel_pool(frusta[:1], cams, grid)
    with pytest.raises(ShapeError):
        voxel_pool(frusta[:, :3], cams, grid)


def test_lift_pool_gradient():
    rng = np.random.default_rng(5)
    grid, cams, _ = _random_rig(rng, d=4, h=3, w=4)
    feat = Tensor(rng.normal(size=(2, 3, 3, 4)))
    proj = Linear(3, 4, rng)
    w = rng.normal(size=(3,) + grid.shape[1::-1])

    def f(feat, *_):
        depth = predict_depth_distribution(feat, proj)
        return (voxel_pool(lift(feat, depth), cams, grid) * w).sum()

    assert gradient_check(f, [feat] + proj.parameters(), 1e-4) < 1e-5
