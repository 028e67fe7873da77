"""Flat ``section.key=value`` run configuration with strict key checking.

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError
from .lar import MappingMode
from .model import ModelConfig
from .network import SS2D, SS2D_1DIR, EncoderConfig, parse_variant
from .scene import SceneSpec
from .view_transform import BevGridSpec

DEFAULTS: dict[str, str] = {
    "scene.seed": "0",
    "scene.views": "4",
    "scene.image": "32,32",
    "scene.boxes": "5",
    "scene.classes": "4",
    "scene.focal": "16",
    "scene.camera_height": "0.5",
    "scene.max_shift": "1",
    "grid.x": "-4,4",
    "grid.y": "-4,4",
    "grid.z": "-1,3",
    "grid.cell": "1",
    "model.c_img": "16",
    "model.depth": "1,6,8",
    "model.head_channels": "16",
    "ssm.n_state": "4",
    "ssm.n_dirs": "4",
    "encoder.variant": "LAR-SS2D",
    "encoder.channels": "16,32,64",
    "encoder.pe": "true",
    "lar.mode": "many-to-one",
    "lar.kernel": "3",
    "lar.groups": "4",
    "temporal.enabled": "false",
    "train.steps": "200",
    "train.lr": "0.005",
    "train.weight_decay": "0.01",
    "train.seed": "0",
    "bench.kind": "both",
    "bench.length": "4096",
    "bench.d_inner": "16",
    "bench.n_state": "8",
    "bench.repeats": "3",
    "bench.chunk": "0",
}


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float
    weight_decay: float
    seed: int


@dataclass(frozen=True)
class BenchConfig:
    kind: str
    length: int
    d_inner: int
    n_state: int
    repeats: int
    chunk: int


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec
    model: ModelConfig
    train: TrainConfig
    bench: BenchConfig
    flat: tuple[tuple[str, str], ...]

    def format(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.flat)

    def with_overrides(self, **overrides: str) -> "RunConfig":
        flat = dict(self.flat)
        flat.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return build_config(flat)


def parse_lines(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _get(flat, key, conv):
    try:
        return conv(flat[key])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {flat[key]!r}") from exc


def _ints(s):
    return tuple(int(v) for v in s.split(","))


def _floats(s):
    return tuple(float(v) for v in s.split(","))


def _bool(s):
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(s)


def _pair(s):
    vals = _floats(s)
    if len(vals) != 2:
        raise ValueError(s)
    return vals


def build_config(flat: dict[str, str]) -> RunConfig:
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    flat = {**DEFAULTS, **flat}
    grid = BevGridSpec(_get(flat, "grid.x", _pair), _get(flat, "grid.y", _pair), _get(flat, "grid.z", _pair), _get(flat, "grid.cell", float))
    depth = _get(flat, "model.depth", _floats)
    if len(depth) != 3:
        raise ConfigError("model.depth must be min,max,count")
    d_min, d_max, d_count = depth
    if d_count != int(d_count) or d_count < 2 or not 0 < d_min < d_max:
        raise ConfigError("model.depth must be min,max,count with 0 < min < max and count >= 2")
    depth_bins = tuple(np.linspace(d_min, d_max, int(d_count)))
    image = _get(flat, "scene.image", _ints)
    if len(image) != 2:
        raise ConfigError("scene.image must be height,width")
    scene = SceneSpec(
        seed=_get(flat, "scene.seed", int),
        n_views=_get(flat, "scene.views", int),
        image_hw=image,
        grid=grid,
        n_classes=_get(flat, "scene.classes", int),
        n_boxes=_get(flat, "scene.boxes", int),
        camera_height=_get(flat, "scene.camera_height", float),
        focal=_get(flat, "scene.focal", float),
        depth_bins=depth_bins,
        max_shift=_get(flat, "scene.max_shift", int),
    )
    n_dirs = _get(flat, "ssm.n_dirs", int)
    if n_dirs not in (1, 4):
        raise ConfigError("ssm.n_dirs must be 1 or 4")
    kinds = parse_variant(flat["encoder.variant"])
    if n_dirs == 1:
        kinds = tuple(SS2D_1DIR if k == SS2D else k for k in kinds)
    mode_kind = flat["lar.mode"]
    kernel = _get(flat, "lar.kernel", int)
    encoder = EncoderConfig(
        group_kinds=(kinds,) * 3,
        channels=_get(flat, "encoder.channels", _ints),
        lar_mode=MappingMode(mode_kind, kernel),
        use_pe=_get(flat, "encoder.pe", _bool),
        n_state=_get(flat, "ssm.n_state", int),
        lar_groups=_get(flat, "lar.groups", int),
    )
    model = ModelConfig(
        image_hw=image,
        c_img=_get(flat, "model.c_img", int),
        n_state=_get(flat, "ssm.n_state", int),
        n_depth=int(d_count),
        grid=grid,
        encoder=encoder,
        n_classes=scene.n_classes,
        head_channels=_get(flat, "model.head_channels", int),
        temporal=_get(flat, "temporal.enabled", _bool),
    )
    model.head  # divisibility check at load time
    train = TrainConfig(
        steps=_get(flat, "train.steps", int),
        lr=_get(flat, "train.lr", float),
        weight_decay=_get(flat, "train.weight_decay", float),
        seed=_get(flat, "train.seed", int),
    )
    if train.steps < 0 or train.lr < 0:
        raise ConfigError("train.steps and train.lr must be non-negative")
    bench = BenchConfig(
        kind=flat["bench.kind"],
        length=_get(flat, "bench.length", int),
        d_inner=_get(flat, "bench.d_inner", int),
        n_state=_get(flat, "bench.n_state", int),
        repeats=_get(flat, "bench.repeats", int),
        chunk=_get(flat, "bench.chunk", int),
    )
    if bench.kind not in ("sequential", "chunked", "both"):
        raise ConfigError("bench.kind must be sequential, chunked or both")
    if min(bench.length, bench.d_inner, bench.n_state) < 1 or bench.repeats < 0 or bench.chunk < 0:
        raise ConfigError("bench sizes must be >= 1 and repeats/chunk >= 0")
    return RunConfig(scene, model, train, bench, tuple(sorted(flat.items())))


def parse_config(text: str) -> RunConfig:
    return build_config(parse_lines(text))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def default_config() -> RunConfig:
    return build_config({})
