"""Training, evaluation, benchmarking and visualization entry points."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .config import BenchConfig, RunConfig
from .errors import DomainError, IoError, NumericsError
from .lar import LARGroup, base_offsets, export_mapping, format_mapping
from .metrics import OccupancyVolume, confusion_matrix, format_report, masked_accuracy, miou
from .model import OccupancyModel, occupancy_loss
from .network import logits_to_labels
from .optim import AdamW
from .scene import CLASS_COLORS, Scene, generate_scene
from .ssm import DiscretizedStep, default_chunk_len, scan_chunked, scan_sequential

PPM_SCALE = 8
MAP_SCALE = 16


@dataclass(eq=False)
class TrainResult:
    losses: list[float]
    model: OccupancyModel
    accuracy: float
    iou: np.ndarray
    miou: float

    @property
    def report(self) -> str:
        return format_report(self.iou, self.miou)

    def loss_curve(self) -> str:
        return "".join(f"{i} {v:.12e}\n" for i, v in enumerate(self.losses))


def build_model(cfg: RunConfig) -> OccupancyModel:
    return OccupancyModel(cfg.model, np.random.default_rng(cfg.train.seed))


def forward(model: OccupancyModel, scene: Scene) -> Tensor:
    return model(scene.images, scene.cams, scene.prev_images, scene.motion)


def predict(model: OccupancyModel, scene: Scene) -> np.ndarray:
    with no_grad():
        return logits_to_labels(forward(model, scene))


def evaluate(model: OccupancyModel, scene: Scene) -> tuple[np.ndarray, float, float]:
    labels = predict(model, scene)
    pred = OccupancyVolume(labels, scene.gt.n_classes)
    iou, mean = miou(confusion_matrix(pred, scene.gt))
    return iou, mean, masked_accuracy(labels, scene.gt)


def run_train(cfg: RunConfig, scene: Scene | None = None, model: OccupancyModel | None = None) -> TrainResult:
    """AdamW on masked voxel cross-entropy; raises NumericsError at the first non-finite loss."""
    scene = scene if scene is not None else generate_scene(cfg.scene)
    model = model if model is not None else build_model(cfg)
    opt = AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    losses = []
    for step in range(cfg.train.steps):
        opt.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = occupancy_loss(forward(model, scene), scene.gt)
                value = float(loss.item())
                if not np.isfinite(value):
                    raise NumericsError(f"non-finite loss {value}")
                backward(loss)
        except (NumericsError, DomainError) as exc:
            # an underflowed step size is a symptom of divergence as well
            raise NumericsError(f"diverged at step {step}: {exc}", step=step) from exc
        losses.append(value)
        for p in model.parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericsError(f"non-finite gradient at step {step}", step=step)
        opt.step()
    iou, mean, acc = evaluate(model, scene)
    return TrainResult(losses, model, acc, iou, mean)


def run_eval(cfg: RunConfig, state: dict[str, np.ndarray], scene: Scene | None = None) -> str:
    """Metrics report for stored weights; ConfigError names any mismatched parameters."""
    scene = scene if scene is not None else generate_scene(cfg.scene)
    model = build_model(cfg)
    model.load_state_dict(state)
    iou, mean, _ = evaluate(model, scene)
    return format_report(iou, mean)


# ---------------------------------------------------------------- bench


def run_bench(bench: BenchConfig, seed: int = 0) -> str:
    """Scan throughput report.  Equivalence is always checked; timings need ``repeats > 0``."""
    rng = np.random.default_rng(seed)
    L, d, n = bench.length, bench.d_inner, bench.n_state
    chunk = bench.chunk or default_chunk_len(L)
    step = DiscretizedStep(
        A_bar=np.exp(-rng.uniform(1e-3, 0.5, size=(L, d, n))),
        B_bar_x=rng.normal(size=(L, d, n)),
        C=rng.normal(size=(L, n)),
    )
    ref = scan_sequential(step)
    got = scan_chunked(step, chunk_len=chunk)
    rel = float(np.abs(got - ref).max() / max(np.abs(ref).max(), np.finfo(float).tiny))
    lines = [f"L {L}", f"d_inner {d}", f"n_state {n}", f"chunk {chunk}", "threads 1", f"max_rel_diff {rel:.3e}"]
    kinds = ("sequential", "chunked") if bench.kind == "both" else (bench.kind,)
    if bench.repeats > 0:
        for kind in kinds:
            fn = (lambda: scan_sequential(step)) if kind == "sequential" else (lambda: scan_chunked(step, chunk_len=chunk))
            best = np.inf
            for _ in range(bench.repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            lines.append(f"{kind}_seconds {best:.6f}")
            lines.append(f"{kind}_tokens_per_s {L / best:.1f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- images


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected uint8 [H, W, 3]")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_ppm(rgb))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def bev_class_map(labels: np.ndarray, free_class: int = 0) -> np.ndarray:
    """Top-down ``[Y, X]`` view: the highest non-free class in each column, else free."""
    lab = np.asarray(labels).transpose(1, 0, 2)  # [Y, X, Z]
    occupied = lab != free_class
    top = lab.shape[2] - 1 - np.argmax(occupied[..., ::-1], axis=2)
    picked = np.take_along_axis(lab, top[..., None], axis=2)[..., 0]
    return np.where(occupied.any(axis=2), picked, free_class)


def render_class_map(class_map: np.ndarray, scale: int = PPM_SCALE) -> np.ndarray:
    palette = np.round(CLASS_COLORS * 255).astype(np.uint8)
    img = palette[class_map]
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def _draw_line(img, p0, p1, color):
    steps = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    rows = np.round(np.linspace(p0[0], p1[0], steps + 1)).astype(int)
    cols = np.round(np.linspace(p0[1], p1[1], steps + 1)).astype(int)
    h, w = img.shape[:2]
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    img[rows[ok], cols[ok]] = color


def mapping_displacements(entries, height: int, width: int) -> np.ndarray:
    """Attention-weighted learned displacement ``[H, W, 2]`` per output cell.

    Each entry is compared with where it would read under zero offsets (its
    clamped neighbourhood position), so an identity field gives all zeros.
    """
    disp = np.zeros((height, width, 2))
    if not entries:
        return disp
    kk = len(entries) // (height * width)
    base = base_offsets(int(round(np.sqrt(kk))))
    for i, e in enumerate(entries):
        dy, dx = base[i % kk]
        nominal = (min(max(e.row + dy, 0), height - 1), min(max(e.col + dx, 0), width - 1))
        disp[e.row, e.col] += e.weight * np.array([e.src_row - nominal[0], e.src_col - nominal[1]])
    return disp


def render_mapping(entries, height: int, width: int, scale: int = MAP_SCALE) -> np.ndarray:
    """Correspondence plot: a dot per output cell and a segment along its learned displacement."""
    img = np.full((height * scale, width * scale, 3), 255, dtype=np.uint8)
    img[::scale, :] = 225
    img[:, ::scale] = 225
    disp = mapping_displacements(entries, height, width)
    half = scale // 2
    for r in range(height):
        for c in range(width):
            centre = np.array([r * scale + half, c * scale + half], dtype=float)
            if np.abs(disp[r, c]).max() * scale >= 0.5:
                _draw_line(img, centre, centre + disp[r, c] * scale, (40, 90, 200))
            img[r * scale + half - 1 : r * scale + half + 2, c * scale + half - 1 : c * scale + half + 2] = (0, 0, 0)
    return img


def lar_traces(model: OccupancyModel, scene: Scene):
    """(block, group index, LAR group, its input map) for every LAR group in the encoder."""
    enc = model.encoder
    with no_grad():
        bev = model.bev_features(scene.images, scene.cams)
        if model.fusion is not None:
            bev = model.fusion(bev, model.bev_features(scene.prev_images, scene.cams), scene.motion, model.cfg.grid)
        x = enc.stem(bev)
        out = []
        for b, block in enumerate(enc.blocks):
            for gi, group in enumerate(block.groups):
                if isinstance(group, LARGroup):
                    out.append((b, gi, group, x))
                x = group(x)
            if b < len(enc.downs):
                x = enc.downs[b](x)
    return out


def emit_images(model: OccupancyModel, scene: Scene, out_dir) -> list[Path]:
    """Write the predicted and true top-down class maps plus one mapping plot (and text) per LAR channel group."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    written = []
    pred = predict(model, scene)
    for name, labels in (("bev_pred.ppm", pred), ("bev_gt.ppm", scene.gt.labels)):
        path = out_dir / name
        write_ppm(path, render_class_map(bev_class_map(labels, scene.gt.free_class)))
        written.append(path)
    for b, gi, group, x in lar_traces(model, scene):
        with no_grad():
            field, attention = group.fields(x)
        h, w = x.shape[-2:]
        for g in range(field.groups):
            entries = export_mapping(field, g, attention)
            stem = f"lar_b{b}_l{gi}_g{g}"
            path = out_dir / f"{stem}.ppm"
            write_ppm(path, render_mapping(entries, h, w))
            try:
                (out_dir / f"{stem}.txt").write_text(format_mapping(entries))
            except OSError as exc:
                raise IoError(f"cannot write {stem}.txt: {exc}") from exc
            written.append(path)
    return written
