"""Synthetic box-world scenes with exact voxel ground truth.

Boxes are axis-aligned in the current ego frame and snapped to the voxel
lattice, so the rendered views and the rasterized labels describe the
same geometry.  Cameras sit at the ego origin and look outward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import FREE, OccupancyVolume
from .model import MICRO_GRID
from .temporal import yaw_motion
from .view_transform import BevGridSpec, CameraModel

BACKGROUND = np.array([0.55, 0.65, 0.8])
CLASS_COLORS = np.array(
    [[1.0, 1.0, 1.0], [0.85, 0.2, 0.2], [0.2, 0.7, 0.25], [0.2, 0.35, 0.9], [0.9, 0.75, 0.1], [0.6, 0.2, 0.7], [0.1, 0.7, 0.7]]
)
# shade per hit axis (x face, y face, z face)
FACE_SHADE = np.array([0.8, 0.65, 1.0])
_CAM_AXES = np.array([[0, 0, 1], [-1, 0, 0], [0, -1, 0]], dtype=np.float64)  # camera -> ego axes at yaw 0


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_views: int = 4
    image_hw: tuple[int, int] = (32, 32)
    grid: BevGridSpec = MICRO_GRID
    n_classes: int = 4
    n_boxes: int = 5
    boxes: tuple[Box, ...] | None = None  # explicit objects override random ones
    camera_height: float = 0.5
    focal: float = 16.0
    depth_bins: tuple[float, ...] = tuple(np.linspace(1.0, 6.0, 8))
    max_shift: int = 1  # previous-frame ego offset, in cells

    def __post_init__(self):
        if self.n_views < 1 or self.focal <= 0:
            raise ConfigError("need at least one view and a positive focal length")
        if min(self.image_hw) < 1:
            raise ConfigError("degenerate image size")
        if self.n_classes > len(CLASS_COLORS) or self.n_classes < 2:
            raise ConfigError(f"n_classes must be in 2..{len(CLASS_COLORS)}")
        if self.n_boxes < 0 or self.max_shift < 0:
            raise ConfigError("box count and shift must be non-negative")


@dataclass(eq=False)
class Scene:
    images: np.ndarray  # [V, 3, h, w]
    cams: list[CameraModel]
    gt: OccupancyVolume
    boxes: tuple[Box, ...]
    prev_images: np.ndarray
    motion: np.ndarray  # previous ego -> current ego
    spec: SceneSpec = field(repr=False)

    @property
    def mask(self) -> np.ndarray:
        return self.gt.mask


def make_cameras(spec: SceneSpec) -> list[CameraModel]:
    h, w = spec.image_hw
    K = np.array([[spec.focal, 0.0, (w - 1) / 2], [0.0, spec.focal, (h - 1) / 2], [0.0, 0.0, 1.0]])
    cams = []
    for i in range(spec.n_views):
        T = yaw_motion(2 * np.pi * i / spec.n_views)
        T[:3, :3] = T[:3, :3] @ _CAM_AXES
        T[2, 3] = spec.camera_height
        cams.append(CameraModel(K, T, np.asarray(spec.depth_bins)))
    return cams


def random_boxes(spec: SceneSpec, rng: np.random.Generator) -> tuple[Box, ...]:
    """Lattice-aligned boxes standing on the grid floor, keeping the cell(s) at the origin clear."""
    g = spec.grid
    xn, yn, zn = g.shape
    lo_arr = np.array([r[0] for r in g.ranges])
    boxes = []
    while len(boxes) < spec.n_boxes:
        size = rng.integers(1, [3, 3, zn + 1], endpoint=False)
        start = np.array([rng.integers(0, xn - size[0] + 1), rng.integers(0, yn - size[1] + 1), 0])
        lo = lo_arr + start * g.cell
        hi = lo + size * g.cell
        if lo[0] < g.cell and hi[0] > -g.cell and lo[1] < g.cell and hi[1] > -g.cell:
            continue  # would swallow the cameras
        boxes.append(Box(tuple(map(float, lo)), tuple(map(float, hi)), int(rng.integers(1, spec.n_classes))))
    return tuple(boxes)


def rasterize(boxes, grid: BevGridSpec, n_classes: int) -> np.ndarray:
    """Label every voxel a box overlaps with positive volume; later boxes win."""
    labels = np.full(grid.shape, FREE, dtype=np.int64)
    centers = [grid.centers(a) for a in range(3)]
    half = grid.cell / 2
    for box in boxes:
        if not 0 <= box.label < n_classes:
            raise ConfigError(f"box label {box.label} outside 0..{n_classes - 1}")
        sel = [(c + half > lo + 1e-9) & (c - half < hi - 1e-9) for c, lo, hi in zip(centers, box.lo, box.hi)]
        labels[np.ix_(*sel)] = box.label
    return labels


def render(cams: list[CameraModel], boxes, image_hw) -> np.ndarray:
    """Flat-shaded ray casting of boxes against a constant background."""
    h, w = image_hw
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty((len(cams), 3, h, w))
    for i, cam in enumerate(cams):
        dirs_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
        dirs = dirs_cam @ cam.extrinsic[:3, :3].T
        origin = cam.extrinsic[:3, 3]
        best = np.full((h, w), np.inf)
        color = np.broadcast_to(BACKGROUND, (h, w, 3)).copy()
        for box in boxes:
            t_hit, axis = _ray_box(origin, dirs, np.array(box.lo), np.array(box.hi))
            closer = t_hit < best
            best[closer] = t_hit[closer]
            color[closer] = CLASS_COLORS[box.label] * FACE_SHADE[axis[closer]][:, None]
        out[i] = color.transpose(2, 0, 1)
    return out


def _ray_box(origin, dirs, lo, hi):
    """Entry distance along each ray (inf on a miss) and the axis of the entry face."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    t_near = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    t_far = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    enter = t_near.max(axis=-1)
    leave = t_far.min(axis=-1)
    axis = t_near.argmax(axis=-1)
    hit = (enter <= leave) & (enter > 0)
    return np.where(hit, enter, np.inf), axis


def camera_mask(cams: list[CameraModel], grid: BevGridSpec, image_hw) -> np.ndarray:
    """Voxels whose centre projects inside some view within that view's depth range."""
    h, w = image_hw
    centers = np.stack(np.meshgrid(*[grid.centers(a) for a in range(3)], indexing="ij"), axis=-1)
    mask = np.zeros(grid.shape, dtype=bool)
    for cam in cams:
        u, v, d = cam.project(centers)
        ok = (d >= cam.depth_bins[0]) & (d <= cam.depth_bins[-1])
        ok &= (u >= -0.5) & (u < w - 0.5) & (v >= -0.5) & (v < h - 0.5)
        mask |= ok
    return mask


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    cams = make_cameras(spec)
    boxes = spec.boxes if spec.boxes is not None else random_boxes(spec, rng)
    labels = rasterize(boxes, spec.grid, spec.n_classes)
    gt = OccupancyVolume(labels, spec.n_classes, camera_mask(cams, spec.grid, spec.image_hw))
    images = render(cams, boxes, spec.image_hw)
    shift = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2) * spec.grid.cell
    motion = yaw_motion(0.0, float(shift[0]), float(shift[1]))
    # the previous ego sat at -shift in the current frame
    prev_cams = [CameraModel(c.intrinsics, motion @ c.extrinsic, c.depth_bins) for c in cams]
    prev_images = render(prev_cams, boxes, spec.image_hw)
    return Scene(images, cams, gt, tuple(boxes), prev_images, motion, spec)
