"""Ego-motion alignment of the previous BEV frame and concatenation fusion."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import ConfigError, ShapeError
from .nn import Linear, Module
from .view_transform import BevGridSpec

_SNAP = 1e-9


def yaw_motion(yaw: float = 0.0, tx: float = 0.0, ty: float = 0.0) -> np.ndarray:
    """Planar rigid transform (previous ego -> current ego)."""
    c, s = np.cos(yaw), np.sin(yaw)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    T[0, 3], T[1, 3] = tx, ty
    return T


def _check_motion(motion: np.ndarray) -> np.ndarray:
    T = np.asarray(motion, dtype=np.float64)
    if T.shape != (4, 4):
        raise ConfigError("ego motion must be a 4x4 transform")
    R = T[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
        raise ConfigError("ego motion rotation block is not orthonormal")
    return T


def previous_frame_positions(motion, grid: BevGridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fractional (row, col) in the previous map for every current cell centre, plus an in-grid mask."""
    T = _check_motion(motion)
    R, t = T[:2, :2], T[:2, 3]
    xs, ys = grid.centers(0), grid.centers(1)
    px, py = np.meshgrid(xs, ys, indexing="xy")  # [Yn, Xn]
    cur = np.stack([px, py], axis=-1)
    prev = (cur - t) @ R  # R^T (p - t)
    (x0, x1), (y0, y1) = grid.x_range, grid.y_range
    inside = (prev[..., 0] >= x0) & (prev[..., 0] < x1) & (prev[..., 1] >= y0) & (prev[..., 1] < y1)
    col = (prev[..., 0] - x0) / grid.cell - 0.5
    row = (prev[..., 1] - y0) / grid.cell - 0.5
    # integral motions should hit cell centres exactly, not 1e-15 beside them
    col = np.where(np.abs(col - np.round(col)) < _SNAP, np.round(col), col)
    row = np.where(np.abs(row - np.round(row)) < _SNAP, np.round(row), row)
    return row, col, inside


def warp_previous_bev(prev, motion, grid: BevGridSpec) -> Tensor:
    """Resample ``prev [..., C, Yn, Xn]`` into the current ego frame.

    Each current cell centre is mapped into the previous frame by the
    inverse motion (planar part only) and read bilinearly; positions outside
    the previous grid read exactly 0.
    """
    prev = as_tensor(prev)
    xn, yn, _ = grid.shape
    if prev.shape[-2:] != (yn, xn):
        raise ShapeError(f"BEV map {prev.shape} does not match grid ({yn}, {xn})")
    row, col, inside = previous_frame_positions(motion, grid)
    *lead, c, _, _ = prev.shape
    x = prev.reshape((-1, c, yn, xn))
    n = x.shape[0]
    py = np.broadcast_to(row, (n, yn, xn))
    px = np.broadcast_to(col, (n, yn, xn))
    out = ops.gather_bilinear(x, py, px, padding="zeros") * inside.astype(np.float64)
    return out.reshape(prev.shape)


def fuse_temporal(current, aligned, proj: Linear) -> Tensor:
    """Concatenate along channels, then a pointwise projection back to C channels."""
    current, aligned = as_tensor(current), as_tensor(aligned)
    if current.shape != aligned.shape:
        raise ShapeError(f"current {current.shape} and aligned {aligned.shape} differ")
    return proj(ops.concat([current, aligned], axis=-3), axis=-3)


class TemporalFusion(Module):
    """Fusion projection initialised to ``[I, 0]`` (starts out passing the current frame)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.proj = Linear(2 * channels, channels, rng, zero_init=True)
        self.proj.weight.data[:channels] = np.eye(channels)

    def __call__(self, current, prev, motion, grid: BevGridSpec) -> Tensor:
        return fuse_temporal(current, warp_previous_bev(prev, motion, grid), self.proj)
