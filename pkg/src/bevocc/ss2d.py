"""Four-direction 2D scanning around the S6 layer.

Direction ids: 0 row-major, 1 column-major, 2 reversed row-major,
3 reversed column-major.  A single-direction group uses id 0 only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, as_tensor, ops, parameter
from .errors import ConfigError, ShapeError
from .nn import ChannelNorm, Module
from .ssm import SsmParams, s6_forward


@dataclass(frozen=True, eq=False)
class DirectionOrder:
    id: int
    perm: np.ndarray  # scan position -> raster index
    inverse: np.ndarray  # raster index -> scan position


@lru_cache(maxsize=None)
def direction_order(dir_id: int, height: int, width: int) -> DirectionOrder:
    if height < 1 or width < 1:
        raise ShapeError("map must be at least 1x1")
    raster = np.arange(height * width)
    if dir_id == 0:
        perm = raster
    elif dir_id == 1:
        perm = raster.reshape(height, width).T.reshape(-1)
    elif dir_id == 2:
        perm = raster[::-1]
    elif dir_id == 3:
        perm = raster.reshape(height, width).T.reshape(-1)[::-1]
    else:
        raise ConfigError(f"direction id must be 0..3, got {dir_id}")
    perm = np.ascontiguousarray(perm)
    perm.setflags(write=False)
    inverse = np.argsort(perm)
    inverse.setflags(write=False)
    return DirectionOrder(dir_id, perm, inverse)


def direction_set(n_dirs: int, height: int, width: int) -> list[DirectionOrder]:
    if n_dirs not in (1, 4):
        raise ConfigError(f"n_dirs must be 1 or 4, got {n_dirs}")
    return [direction_order(d, height, width) for d in range(n_dirs)]


def cross_scan(fmap, dirs: list[DirectionOrder]) -> Tensor:
    """``[..., C, H, W] -> [..., K, L, C]`` token sequences, one per direction."""
    fmap = as_tensor(fmap)
    *lead, c, h, w = fmap.shape
    for d in dirs:
        if d.perm.size != h * w:
            raise ShapeError(f"direction {d.id} built for {d.perm.size} tokens, map has {h * w}")
    idx = np.stack([d.perm for d in dirs])  # [K, L]
    seq = fmap.reshape(tuple(lead) + (c, h * w))[..., idx]  # [..., C, K, L]
    nl = len(lead)
    return seq.permute(tuple(range(nl)) + (nl + 1, nl + 2, nl))


def cross_merge(outputs, dirs: list[DirectionOrder], height: int, width: int) -> Tensor:
    """Inverse-permute each direction back to raster order and sum: ``[..., K, L, C] -> [..., C, H, W]``."""
    outputs = as_tensor(outputs)
    *lead, k, length, c = outputs.shape
    if k != len(dirs):
        raise ShapeError(f"{k} sequences for {len(dirs)} directions")
    if length != height * width or any(d.inverse.size != length for d in dirs):
        raise ShapeError(f"sequence length {length} does not match {height}x{width}")
    inv = np.stack([d.inverse for d in dirs])  # [K, L]
    kidx = np.arange(k)[:, None]
    raster = outputs[..., kidx, inv, :].sum(axis=-3)  # [..., L, C]
    nl = len(lead)
    return raster.reshape(tuple(lead) + (height, width, c)).permute(tuple(range(nl)) + (nl + 2, nl, nl + 1))


def ss2d_group_forward(
    fmap,
    params: SsmParams,
    pe=None,
    n_dirs: int = 4,
    norm: ChannelNorm | None = None,
    chunk_len: int | None = None,
) -> Tensor:
    """Residual SS2D group: ``fmap + merge(S6_d(cross_scan(norm(fmap + pe))))``.

    ``params`` is stacked along a leading direction axis of size ``n_dirs``
    (independent directions) or 1 (shared).
    """
    fmap = as_tensor(fmap)
    h, w = fmap.shape[-2:]
    dirs = direction_set(n_dirs, h, w)
    stack = params.A_log.shape[:-2]
    if stack not in ((n_dirs,), (1,)):
        raise ConfigError(f"SSM parameters stacked as {stack}, need ({n_dirs},) or (1,)")
    u = fmap if pe is None else fmap + pe
    u = norm(u) if norm is not None else ops.layer_norm(u, axis=-3)
    seq = cross_scan(u, dirs)
    out = s6_forward(seq, params, chunk_len=chunk_len)
    return fmap + cross_merge(out, dirs, h, w)


class SS2DGroup(Module):
    """Learned SS2D group: channel norm, per-position embedding, S6 per direction."""

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        rng: np.random.Generator,
        n_state: int = 4,
        n_dirs: int = 4,
        dt_rank: int | None = 1,
        share_dirs: bool = False,
        use_pe: bool = True,
        use_d_skip: bool = True,
    ):
        direction_set(n_dirs, height, width)  # validates n_dirs
        self.n_dirs = n_dirs
        self.norm = ChannelNorm(channels)
        self.pe = parameter(np.zeros((channels, height, width))) if use_pe else None
        self.ssm = SsmParams.init(
            channels, n_state, rng, dt_rank=dt_rank, stack=(1 if share_dirs else n_dirs,), use_d_skip=use_d_skip
        )

    def __call__(self, fmap: Tensor) -> Tensor:
        return ss2d_group_forward(fmap, self.ssm, self.pe, self.n_dirs, self.norm)
