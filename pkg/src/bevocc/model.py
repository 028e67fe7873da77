"""End-to-end micro occupancy model: images -> BEV -> voxel logits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError
from .metrics import OccupancyVolume
from .network import BevEncoder, EncoderConfig, MicroBackbone, OccHead, OccHeadConfig
from .nn import Module
from .temporal import TemporalFusion
from .view_transform import BevGridSpec, CameraModel, DepthHead, PoolingPlan, lift, pooling_plan, voxel_pool

MICRO_GRID = BevGridSpec((-4.0, 4.0), (-4.0, 4.0), (-1.0, 3.0), 1.0)


@dataclass(frozen=True)
class ModelConfig:
    image_hw: tuple[int, int] = (32, 32)
    c_img: int = 16
    n_state: int = 4
    n_depth: int = 8
    grid: BevGridSpec = MICRO_GRID
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_classes: int = 4
    head_channels: int = 16
    temporal: bool = False

    def __post_init__(self):
        if self.c_img < 1 or self.n_depth < 2:
            raise ConfigError("c_img must be positive and n_depth at least 2")
        xn, yn, zn = self.grid.shape
        if xn % 4 or yn % 4:
            raise ConfigError(f"BEV grid {xn}x{yn} must be divisible by 4 for the three-scale encoder")
        h, w = self.image_hw
        if h % MicroBackbone.stride or w % MicroBackbone.stride:
            raise ConfigError(f"image size {h}x{w} must be divisible by {MicroBackbone.stride}")

    @property
    def head(self) -> OccHeadConfig:
        return OccHeadConfig(self.n_classes, self.grid.shape[2], self.head_channels)


class OccupancyModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        head_cfg = cfg.head  # validates divisibility
        xn, yn, _ = cfg.grid.shape
        self.backbone = MicroBackbone(cfg.c_img, *cfg.image_hw, rng, n_state=cfg.n_state)
        self.depth = DepthHead(cfg.c_img, cfg.n_depth, rng)
        self.fusion = TemporalFusion(cfg.c_img, rng) if cfg.temporal else None
        self.encoder = BevEncoder(cfg.c_img, yn, xn, cfg.encoder, cfg.head_channels, rng)
        self.head = OccHead(head_cfg, rng)
        self._plan_key = None
        self._plan: PoolingPlan | None = None

    def _plan_for(self, cams: list[CameraModel], feat_hw) -> PoolingPlan:
        key = tuple(c.intrinsics.tobytes() + c.extrinsic.tobytes() + c.depth_bins.tobytes() for c in cams) + (feat_hw,)
        if key != self._plan_key:
            self._plan = pooling_plan(cams, self.cfg.grid, feat_hw, MicroBackbone.stride)
            self._plan_key = key
        return self._plan

    def bev_features(self, images, cams: list[CameraModel]) -> Tensor:
        """Pooled BEV features ``[C_img, Yn, Xn]`` for one multi-view frame."""
        feats = self.backbone(images)
        frusta = lift(feats, self.depth(feats))
        return voxel_pool(frusta, cams, self.cfg.grid, MicroBackbone.stride, self._plan_for(cams, feats.shape[-2:]))

    def __call__(self, images, cams, prev_images=None, motion=None) -> Tensor:
        """Voxel logits ``[n_classes, Zn, Yn, Xn]``."""
        bev = self.bev_features(images, cams)
        if self.fusion is not None:
            if prev_images is None or motion is None:
                raise ConfigError("temporal model needs the previous frame and the ego motion")
            bev = self.fusion(bev, self.bev_features(prev_images, cams), motion, self.cfg.grid)
        return self.head(self.encoder(bev))


def occupancy_loss(logits: Tensor, gt: OccupancyVolume) -> Tensor:
    """Cross-entropy over voxels, restricted to the camera mask when one is given."""
    k = logits.shape[0]
    flat = logits.permute(1, 2, 3, 0).reshape(-1, k)  # [Z*Y*X, K]
    target = gt.labels.transpose(2, 1, 0).reshape(-1)
    weight = None if gt.mask is None else gt.mask.transpose(2, 1, 0).reshape(-1).astype(np.float64)
    return ops.cross_entropy(flat, target, weight)
