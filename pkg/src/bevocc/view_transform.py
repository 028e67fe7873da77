"""Lift-splat view transformation: per-pixel depth distributions, frustum
lifting, and sum pooling of frustum features into a BEV grid.

Frames: camera coordinates are x right, y down, z forward; the ego frame
is x forward, y left, z up.  BEV maps are ``[C, Yn, Xn]`` (rows follow y).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import ConfigError, ShapeError
from .nn import Linear, Module


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple[float, float] = (-40.0, 40.0)
    y_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (-1.0, 5.4)
    cell: float = 0.4

    def __post_init__(self):
        if self.cell <= 0:
            raise ConfigError("cell size must be positive")
        for name, (lo, hi) in zip("xyz", self.ranges):
            if hi <= lo:
                raise ConfigError(f"empty {name} range")
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ConfigError(f"{name} extent {hi - lo} is not a whole number of {self.cell} m cells")

    @property
    def ranges(self):
        return (self.x_range, self.y_range, self.z_range)

    @property
    def shape(self) -> tuple[int, int, int]:
        """(Xn, Yn, Zn)."""
        return tuple(int(round((hi - lo) / self.cell)) for lo, hi in self.ranges)

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer ``[..., 3]`` (ix, iy, iz) by flooring, plus an in-range mask."""
        pts = np.asarray(points, dtype=np.float64)
        lo = np.array([r[0] for r in self.ranges])
        idx = np.floor((pts - lo) / self.cell).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=-1)
        return idx, valid

    def centers(self, axis: int) -> np.ndarray:
        lo = self.ranges[axis][0]
        return lo + (np.arange(self.shape[axis]) + 0.5) * self.cell


FULL_SCALE_GRID = BevGridSpec()


def _check_rigid(T: np.ndarray, what: str) -> None:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise ConfigError(f"{what} must be 4x4")
    R = T[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0) or np.linalg.det(R) <= 0:
        raise ConfigError(f"{what} rotation block is not a proper orthonormal rotation")
    if not np.allclose(T[3], [0, 0, 0, 1]):
        raise ConfigError(f"{what} bottom row must be [0, 0, 0, 1]")


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    extrinsic: np.ndarray  # camera -> ego
    depth_bins: np.ndarray = field(default_factory=lambda: np.linspace(1.0, 6.0, 8))

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("intrinsics must be 3x3 with fx, fy > 0")
        _check_rigid(self.extrinsic, "extrinsic")
        bins = np.asarray(self.depth_bins, dtype=np.float64)
        if bins.ndim != 1 or bins.size < 1 or np.any(bins <= 0) or np.any(np.diff(bins) <= 0):
            raise ConfigError("depth bins must be positive and strictly increasing")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsic", np.asarray(self.extrinsic, dtype=np.float64))
        object.__setattr__(self, "depth_bins", bins)

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]

    def project(self, points_ego: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Image-plane (u, v) and depth of ego-frame points."""
        pts = np.asarray(points_ego, dtype=np.float64)
        R, t = self.extrinsic[:3, :3], self.extrinsic[:3, 3]
        cam = (pts - t) @ R  # R^T (p - t)
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[..., 0] / z + self.cx
            v = self.fy * cam[..., 1] / z + self.cy
        return u, v, z


def uniform_depth_bins(d_min: float, d_max: float, count: int) -> np.ndarray:
    if count < 2:
        raise ConfigError("need at least two depth bins")
    return np.linspace(d_min, d_max, count)


def frustum_to_ego(cam: CameraModel, u, v, depth, stride: int = 1) -> np.ndarray:
    """Back-project feature pixel (u, v) at ``depth`` metres to ego coordinates ``[..., 3]``.

    At stride s a feature pixel covers an s x s block of image pixels; its
    centre sits at image coordinate ``(u + 0.5) * s - 0.5`` (identity for s = 1).
    """
    u = (np.asarray(u, dtype=np.float64) + 0.5) * stride - 0.5
    v = (np.asarray(v, dtype=np.float64) + 0.5) * stride - 0.5
    d = np.asarray(depth, dtype=np.float64)
    u, v, d = np.broadcast_arrays(u, v, d)
    cam_pts = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=-1)
    R, t = cam.extrinsic[:3, :3], cam.extrinsic[:3, 3]
    return cam_pts @ R.T + t


def frustum_points(cam: CameraModel, height: int, width: int, stride: int) -> np.ndarray:
    """Ego coordinates ``[D, h, w, 3]`` of every (depth bin, feature pixel)."""
    d = cam.depth_bins[:, None, None]
    v = np.arange(height)[None, :, None]
    u = np.arange(width)[None, None, :]
    return frustum_to_ego(cam, u, v, d, stride)


class DepthHead(Module):
    """Pointwise projection of image features to depth-bin logits."""

    def __init__(self, channels: int, n_bins: int, rng: np.random.Generator):
        if n_bins < 2:
            raise ConfigError("need at least two depth bins")
        self.proj = Linear(channels, n_bins, rng)

    def __call__(self, feat: Tensor) -> Tensor:
        return predict_depth_distribution(feat, self.proj)


def predict_depth_distribution(feat, proj: Linear) -> Tensor:
    """``[..., C, h, w] -> [..., D, h, w]`` softmax over depth bins."""
    return ops.softmax(proj(as_tensor(feat), axis=-3), axis=-3)


def lift(feat, depth) -> Tensor:
    """Outer product ``frustum[..., d, c, u, v] = depth[..., d, u, v] * feat[..., c, u, v]``."""
    feat, depth = as_tensor(feat), as_tensor(depth)
    *lead, c, h, w = feat.shape
    if depth.shape[:-3] != tuple(lead) or depth.shape[-2:] != (h, w):
        raise ShapeError(f"depth {depth.shape} does not match features {feat.shape}")
    d = depth.shape[-3]
    return feat.reshape(tuple(lead) + (1, c, h, w)) * depth.reshape(tuple(lead) + (d, 1, h, w))


@dataclass(frozen=True, eq=False)
class PoolingPlan:
    """Which frustum points land in which BEV cell, in canonical (view, depth, row, col) order."""

    point_index: np.ndarray  # positions into the flattened [V*D*h*w] frustum
    cell_index: np.ndarray  # flat iy * Xn + ix per kept point
    n_cells: int
    bev_shape: tuple[int, int]  # (Yn, Xn)


def pooling_plan(cams: list[CameraModel], grid: BevGridSpec, feat_hw: tuple[int, int], stride: int) -> PoolingPlan:
    h, w = feat_hw
    pts = np.stack([frustum_points(cam, h, w, stride) for cam in cams])  # [V, D, h, w, 3]
    idx, valid = grid.cell_index(pts)
    xn, yn, _ = grid.shape
    flat_valid = valid.reshape(-1)
    keep = np.nonzero(flat_valid)[0]
    cells = (idx[..., 1] * xn + idx[..., 0]).reshape(-1)[keep]
    return PoolingPlan(keep, cells, xn * yn, (yn, xn))


def voxel_pool(frusta, cams: list[CameraModel], grid: BevGridSpec, stride: int = 1, plan: PoolingPlan | None = None) -> Tensor:
    """Sum-pool per-view frusta ``[V, D, C, h, w]`` into a BEV map ``[C, Yn, Xn]``.

    Points outside the grid (in x, y or z) are dropped; the height axis is
    collapsed by the sum.
    """
    frusta = as_tensor(frusta)
    if frusta.ndim != 5 or frusta.shape[0] != len(cams):
        raise ShapeError(f"expected [V={len(cams)}, D, C, h, w] frusta, got {frusta.shape}")
    v, d, c, h, w = frusta.shape
    for cam in cams:
        if cam.depth_bins.size != d:
            raise ShapeError(f"camera has {cam.depth_bins.size} depth bins, frustum has {d}")
    if plan is None:
        plan = pooling_plan(cams, grid, (h, w), stride)
    src = frusta.permute(2, 0, 1, 3, 4).reshape(c, -1)[:, plan.point_index]
    bev = ops.scatter_add(src, plan.cell_index, plan.n_cells)
    return bev.reshape((c,) + plan.bev_shape)
