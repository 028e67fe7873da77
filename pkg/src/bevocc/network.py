"""Micro image backbone, hybrid BEV encoder and occupancy head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import ConfigError, ShapeError
from .lar import LARGroup, MappingMode
from .nn import ChannelNorm, Conv2d, Linear, Module
from .ss2d import SS2DGroup

CNN = "CNN"
SS2D = "SS2D"
SS2D_1DIR = "SS2D-1dir"
LAR = "LAR"
GROUP_KINDS = (CNN, SS2D, SS2D_1DIR, LAR)


def parse_variant(name: str) -> tuple[str, str]:
    """``"LAR-SS2D"``, ``"CNN-SS2D*"``, ``"SS2D-1dir-SS2D-1dir"`` -> a pair of group kinds.

    A trailing ``*`` marks a one-directional SS2D group.
    """
    tokens = []
    for tok in name.replace("*", "-1dir").split("-"):
        if tok == "1dir" and tokens and tokens[-1] == SS2D:
            tokens[-1] = SS2D_1DIR
        else:
            tokens.append(tok)
    if len(tokens) != 2 or any(t not in GROUP_KINDS for t in tokens):
        raise ConfigError(f"unknown encoder variant {name!r}; kinds are {', '.join(GROUP_KINDS)}")
    return tokens[0], tokens[1]


@dataclass(frozen=True)
class EncoderConfig:
    group_kinds: tuple = ((LAR, SS2D),) * 3
    channels: tuple = (16, 32, 64)
    lar_mode: MappingMode = MappingMode()
    use_pe: bool = True
    n_state: int = 4
    lar_groups: int = 4

    def __post_init__(self):
        kinds = tuple(tuple(pair) for pair in self.group_kinds)
        if len(kinds) != 3 or any(len(pair) != 2 for pair in kinds):
            raise ConfigError("encoder needs exactly 3 blocks of 2 groups")
        bad = sorted({k for pair in kinds for k in pair} - set(GROUP_KINDS))
        if bad:
            raise ConfigError(f"invalid group kinds: {', '.join(map(str, bad))}")
        ch = tuple(int(c) for c in self.channels)
        if len(ch) != 3 or ch[0] < 1 or not all(a < b for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"channels must be 3 strictly increasing positive ints, got {self.channels}")
        if self.n_state < 1:
            raise ConfigError("n_state must be positive")
        for pair, c in zip(kinds, ch):
            if LAR in pair and c % self.lar_groups:
                raise ConfigError(f"LAR groups {self.lar_groups} do not divide {c} channels")
        object.__setattr__(self, "group_kinds", kinds)
        object.__setattr__(self, "channels", ch)

    @classmethod
    def variant(cls, name: str, **kwargs) -> "EncoderConfig":
        return cls(group_kinds=(parse_variant(name),) * 3, **kwargs)


@dataclass(frozen=True)
class OccHeadConfig:
    n_classes: int = 4
    height_bins: int = 4
    bev_channels: int = 16

    def __post_init__(self):
        if self.n_classes < 2 or self.height_bins < 1:
            raise ConfigError("need at least 2 classes and 1 height bin")
        if self.bev_channels % self.height_bins:
            raise ConfigError(f"bev_channels {self.bev_channels} not divisible by height_bins {self.height_bins}")


class CNNGroup(Module):
    """Residual ``x + conv(silu(norm(conv(x))))`` with 3x3 convolutions."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm = ChannelNorm(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.silu(self.norm(self.conv1(x))))


def make_group(kind: str, channels: int, height: int, width: int, cfg: EncoderConfig, rng: np.random.Generator) -> Module:
    if kind == CNN:
        return CNNGroup(channels, rng)
    if kind in (SS2D, SS2D_1DIR):
        n_dirs = 1 if kind == SS2D_1DIR else 4
        return SS2DGroup(channels, height, width, rng, n_state=cfg.n_state, n_dirs=n_dirs, use_pe=cfg.use_pe)
    if kind == LAR:
        return LARGroup(channels, height, width, rng, mode=cfg.lar_mode, groups=cfg.lar_groups, use_pe=cfg.use_pe)
    raise ConfigError(f"invalid group kind {kind!r}")


class MicroBackbone(Module):
    """Patch embed (stride 4) -> SS2D group -> stride-2 merge -> SS2D group; overall stride 8."""

    stride = 8

    def __init__(self, c_img: int, height: int, width: int, rng: np.random.Generator, n_state: int = 4):
        _check_divisible(height, width, self.stride)
        self.patch = Conv2d(3, c_img, 4, rng, stride=4)
        self.stage1 = SS2DGroup(c_img, height // 4, width // 4, rng, n_state=n_state)
        self.merge = Conv2d(c_img, c_img, 2, rng, stride=2)
        self.stage2 = SS2DGroup(c_img, height // 8, width // 8, rng, n_state=n_state)

    def __call__(self, images) -> Tensor:
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images [V, 3, h, w], got {images.shape}")
        _check_divisible(*images.shape[-2:], self.stride)
        return self.stage2(self.merge(self.stage1(self.patch(images))))


def _check_divisible(h: int, w: int, factor: int) -> None:
    if h % factor or w % factor:
        raise ShapeError(f"spatial size {h}x{w} not divisible by {factor}")


class BevEncoder(Module):
    """Three two-group blocks with strided-conv downsampling and an upsample-concat-1x1 neck."""

    def __init__(self, c_in: int, height: int, width: int, cfg: EncoderConfig, c_out: int, rng: np.random.Generator):
        _check_divisible(height, width, 4)
        self.cfg = cfg
        ch = cfg.channels
        self.stem = Conv2d(c_in, ch[0], 3, rng, padding=1)
        self.blocks = []
        for i, (kinds, c) in enumerate(zip(cfg.group_kinds, ch)):
            h, w = height >> i, width >> i
            self.blocks.append(_Block([make_group(k, c, h, w, cfg, rng) for k in kinds]))
        self.downs = [Conv2d(ch[i], ch[i + 1], 3, rng, stride=2, padding=1) for i in range(2)]
        self.neck = Linear(sum(ch), c_out, rng)

    def block_outputs(self, bev) -> list[Tensor]:
        x = self.stem(as_tensor(bev))
        outs = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            outs.append(x)
            if i < 2:
                x = self.downs[i](x)
        return outs

    def __call__(self, bev) -> Tensor:
        bev = as_tensor(bev)
        _check_divisible(*bev.shape[-2:], 4)
        outs = self.block_outputs(bev)
        pyramid = [ops.upsample_nearest(o, 1 << i) for i, o in enumerate(outs)]
        return self.neck(ops.concat(pyramid, axis=-3), axis=-3)


class _Block(Module):
    def __init__(self, groups: list[Module]):
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        for g in self.groups:
            x = g(x)
        return x


def channel_to_height(bev, height_bins: int) -> Tensor:
    """``[..., C, H, W] -> [..., C // Z, Z, H, W]``; channel ``c`` lands at ``(c // Z, c % Z)``."""
    bev = as_tensor(bev)
    c = bev.shape[-3]
    if c % height_bins:
        raise ShapeError(f"{c} channels not divisible by {height_bins} height bins")
    return bev.reshape(bev.shape[:-3] + (c // height_bins, height_bins) + bev.shape[-2:])


def height_to_channel(vox) -> Tensor:
    vox = as_tensor(vox)
    c, z = vox.shape[-4:-2]
    return vox.reshape(vox.shape[:-4] + (c * z,) + vox.shape[-2:])


def classify_voxels(vox, classifier: Linear) -> Tensor:
    """Pointwise linear over the feature axis of ``[..., C', Z, H, W]``."""
    return classifier(as_tensor(vox), axis=-4)


def logits_to_labels(logits) -> np.ndarray:
    """Argmax of ``[K, Z, Y, X]`` logits, returned in ``[X, Y, Z]`` order."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=0).transpose(2, 1, 0)


class OccHead(Module):
    def __init__(self, cfg: OccHeadConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.classifier = Linear(cfg.bev_channels // cfg.height_bins, cfg.n_classes, rng)

    def __call__(self, bev) -> Tensor:
        return classify_voxels(channel_to_height(bev, self.cfg.height_bins), self.classifier)
