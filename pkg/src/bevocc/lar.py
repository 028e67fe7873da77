"""Local adaptive reordering: learned-offset resampling of a feature map.

Each output position ``p`` reads ``x[p + offset(x)(p)]`` by clamped bilinear
sampling (deformable-convolution style).  Several outputs may read the same
source, so the map is a surjection rather than a permutation.  In
many-to-one mode every position reads a K x K neighbourhood, each entry
shifted by its own learned offset, and fuses the samples with softmax
attention.  Channels are split into G groups, each with its own field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, ops, parameter
from .errors import ConfigError, ShapeError
from .nn import ChannelNorm, Conv2d, Linear, Module

ONE_TO_ONE = "one-to-one"
MANY_TO_ONE = "many-to-one"


@dataclass(frozen=True)
class MappingMode:
    kind: str = MANY_TO_ONE
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in (ONE_TO_ONE, MANY_TO_ONE):
            raise ConfigError(f"unknown mapping kind {self.kind!r}")
        if self.kind == ONE_TO_ONE and self.kernel != 1:
            raise ConfigError("one-to-one mapping uses a single entry (kernel 1)")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")

    @property
    def entry_count(self) -> int:
        return self.kernel * self.kernel


@dataclass
class OffsetField:
    """``offsets [..., G, K*K, 2, H, W]``: (dy, dx) per group, entry and output position."""

    offsets: Tensor

    @property
    def groups(self) -> int:
        return self.offsets.shape[-5]


@dataclass
class AttentionField:
    """``logits [..., G, K*K, H, W]``; ``weights`` normalizes over the entry axis."""

    logits: Tensor

    @property
    def weights(self) -> Tensor:
        return ops.softmax(self.logits, axis=-3)


def base_offsets(kernel: int) -> np.ndarray:
    """``[K*K, 2]`` integer (dy, dx) neighbourhood offsets in raster order."""
    r = kernel // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return np.stack([dy.reshape(-1), dx.reshape(-1)], axis=1).astype(np.float64)


def predict_offsets(fmap, groups: int, kernel: int, weight, bias=None) -> tuple[OffsetField, AttentionField | None]:
    """One 3x3 conv yields ``G*K*K*2`` offset channels then ``G*K*K`` attention logits.

    ``weight`` is ``[out, C, 3, 3]``; when it only has the offset channels no
    attention field is returned.
    """
    fmap, weight = as_tensor(fmap), as_tensor(weight)
    c = fmap.shape[-3]
    if c % groups:
        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    kk = kernel * kernel
    n_off = groups * kk * 2
    if weight.shape[0] not in (n_off, n_off + groups * kk):
        raise ShapeError(f"predictor has {weight.shape[0]} outputs; expected {n_off} or {n_off + groups * kk}")
    lead, (h, w) = fmap.shape[:-3], fmap.shape[-2:]
    x = fmap.reshape((-1, c, h, w))
    y = ops.conv2d(x, weight, bias, padding=1)
    offsets = y[:, :n_off].reshape(tuple(lead) + (groups, kk, 2, h, w))
    attn = None
    if weight.shape[0] > n_off:
        attn = AttentionField(y[:, n_off:].reshape(tuple(lead) + (groups, kk, h, w)))
    return OffsetField(offsets), attn


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return rows, cols


def sample_one_to_one(fmap, offsets) -> Tensor:
    """``out[:, r, c] = bilinear(fmap, r + dy, c + dx)`` with coordinates clamped into the map.

    ``fmap [..., C, H, W]``, ``offsets [..., 2, H, W]``.
    """
    fmap, offsets = as_tensor(fmap), as_tensor(offsets)
    *lead, c, h, w = fmap.shape
    if offsets.shape != tuple(lead) + (2, h, w):
        raise ShapeError(f"offsets {offsets.shape} do not match map {fmap.shape}")
    rows, cols = _grid(h, w)
    x = fmap.reshape((-1, c, h, w))
    off = offsets.reshape((-1, 2, h, w))
    out = ops.gather_bilinear(x, off[:, 0] + rows, off[:, 1] + cols, padding="border")
    return out.reshape(fmap.shape)


def fuse_many_to_one(fmap, offsets, attn, kernel: int) -> Tensor:
    """Attention-weighted sum of K*K clamped bilinear samples around each position.

    ``fmap [..., C, H, W]``, ``offsets [..., K*K, 2, H, W]``, ``attn [..., K*K, H, W]``
    (already normalized over the entry axis).
    """
    fmap, offsets, attn = as_tensor(fmap), as_tensor(offsets), as_tensor(attn)
    *lead, c, h, w = fmap.shape
    kk = kernel * kernel
    if offsets.shape != tuple(lead) + (kk, 2, h, w) or attn.shape != tuple(lead) + (kk, h, w):
        raise ShapeError(f"offsets {offsets.shape} / attention {attn.shape} do not match map {fmap.shape}, K={kernel}")
    rows, cols = _grid(h, w)
    base = base_offsets(kernel)
    py_base = rows[None] + base[:, 0, None, None]  # [K*K, H, W]
    px_base = cols[None] + base[:, 1, None, None]
    x = fmap.reshape((-1, c, h, w))
    off = offsets.reshape((-1, kk, 2, h, w))
    samples = ops.gather_bilinear(x, off[:, :, 0] + py_base, off[:, :, 1] + px_base, padding="border")
    weights = attn.reshape((-1, 1, kk, h, w))
    out = (samples * weights).sum(axis=2)
    return out.reshape(fmap.shape)


def resample_groups(fmap, mode: MappingMode, field: OffsetField, attention: AttentionField | None) -> Tensor:
    """Split channels into G groups and resample each with its own field."""
    fmap = as_tensor(fmap)
    *lead, c, h, w = fmap.shape
    g = field.groups
    if c % g:
        raise ConfigError(f"channels {c} not divisible by groups {g}")
    x = fmap.reshape(tuple(lead) + (g, c // g, h, w))
    if mode.kind == ONE_TO_ONE:
        off = field.offsets.reshape(tuple(lead) + (g, 2, h, w))
        out = sample_one_to_one(x, off)
    else:
        if attention is None:
            raise ConfigError("many-to-one mapping needs an attention field")
        out = fuse_many_to_one(x, field.offsets, attention.weights, mode.kernel)
    return out.reshape(fmap.shape)


def lar_group_forward(fmap, mode: MappingMode, groups: int, pe, predictor: Conv2d, mix: Linear, norm: ChannelNorm) -> Tensor:
    """Residual LAR group: ``fmap + mix(resample(norm(fmap + pe)))``."""
    fmap = as_tensor(fmap)
    u = fmap if pe is None else fmap + pe
    u = norm(u)
    field, attention = predict_offsets(u, groups, mode.kernel, predictor.weight, predictor.bias)
    return fmap + mix(resample_groups(u, mode, field, attention), axis=-3)


class LARGroup(Module):
    """LAR group with zero-initialized predictor and mix, hence an exact identity at init."""

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        rng: np.random.Generator,
        mode: MappingMode = MappingMode(),
        groups: int = 4,
        use_pe: bool = True,
    ):
        if channels % groups:
            raise ConfigError(f"channels {channels} not divisible by groups {groups}")
        self.mode = mode
        self.groups = groups
        kk = mode.entry_count
        n_out = groups * kk * (2 if mode.kind == ONE_TO_ONE else 3)
        self.norm = ChannelNorm(channels)
        self.pe = parameter(np.zeros((channels, height, width))) if use_pe else None
        self.predictor = Conv2d(channels, n_out, 3, rng, padding=1, zero_init=True)
        self.mix = Linear(channels, channels, rng, zero_init=True)

    def __call__(self, fmap: Tensor) -> Tensor:
        return lar_group_forward(fmap, self.mode, self.groups, self.pe, self.predictor, self.mix, self.norm)

    def fields(self, fmap: Tensor) -> tuple[OffsetField, AttentionField | None]:
        """Offset/attention fields this group would use on ``fmap``."""
        u = as_tensor(fmap) if self.pe is None else as_tensor(fmap) + self.pe
        return predict_offsets(self.norm(u), self.groups, self.mode.kernel, self.predictor.weight, self.predictor.bias)


# ---------------------------------------------------------------- mapping export


@dataclass(frozen=True)
class MappingEntry:
    group: int
    row: int
    col: int
    src_row: float
    src_col: float
    weight: float

    def format(self) -> str:
        return f"{self.group} {self.row} {self.col} -> {self.src_row:.4f} {self.src_col:.4f} {self.weight:.6f}"


def export_mapping(field: OffsetField, group: int, attention: AttentionField | None = None) -> list[MappingEntry]:
    """Flatten one group's correspondences (output position <- clamped source position).

    Raster order over output positions, entry order within a position.
    Weights come from the attention field, or are uniform without one.
    """
    off = np.asarray(field.offsets.data)
    if off.ndim != 5:
        raise ShapeError(f"expected an unbatched field [G, K*K, 2, H, W], got {off.shape}")
    g_count, kk, _, h, w = off.shape
    if not 0 <= group < g_count:
        raise ConfigError(f"group {group} out of range for {g_count} groups")
    kernel = int(round(np.sqrt(kk)))
    base = base_offsets(kernel)
    if attention is not None:
        weights = attention.weights.data[group]
    else:
        weights = np.full((kk, h, w), 1.0 / kk)
    entries = []
    for r in range(h):
        for c in range(w):
            for e in range(kk):
                sy = min(max(r + base[e, 0] + off[group, e, 0, r, c], 0.0), h - 1.0)
                sx = min(max(c + base[e, 1] + off[group, e, 1, r, c], 0.0), w - 1.0)
                entries.append(MappingEntry(group, r, c, float(sy), float(sx), float(weights[e, r, c])))
    return entries


def format_mapping(entries: list[MappingEntry]) -> str:
    return "".join(e.format() + "\n" for e in entries)


def parse_mapping(text: str) -> list[MappingEntry]:
    entries = []
    for line in text.splitlines():
        if not line.strip():
            continue
        left, right = line.split("->")
        g, r, c = (int(v) for v in left.split())
        sy, sx, wt = (float(v) for v in right.split())
        entries.append(MappingEntry(g, r, c, sy, sx, wt))
    return entries
