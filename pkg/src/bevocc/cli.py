"""Command line entry point: ``bevocc {gen-scene,train,eval,bench,viz}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import default_config, load_config
from .errors import BevOccError, ConfigError, IoError, NumericsError
from .harness import bev_class_map, build_model, emit_images, render_class_map, run_bench, run_eval, run_train, write_ppm
from .scene import generate_scene
from .weights import load_weights, save_weights

EXIT_CONFIG = 2
EXIT_NUMERICS = 3
EXIT_OTHER = 1
WEIGHTS = "weights.mocc"


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)


def cmd_gen_scene(cfg, out: Path) -> None:
    scene = generate_scene(cfg.scene)
    for i, (cur, prev) in enumerate(zip(scene.images, scene.prev_images)):
        write_ppm(out / f"view{i}.ppm", _to_u8(cur))
        write_ppm(out / f"view{i}_prev.ppm", _to_u8(prev))
    write_ppm(out / "gt_bev.ppm", render_class_map(bev_class_map(scene.gt.labels)))
    boxes = "".join(f"{b.label} {' '.join(f'{v:g}' for v in b.lo)} {' '.join(f'{v:g}' for v in b.hi)}\n" for b in scene.boxes)
    _write(out / "boxes.txt", boxes)
    print(f"scene seed={cfg.scene.seed} views={len(scene.cams)} boxes={len(scene.boxes)} visible_voxels={int(scene.gt.mask.sum())}")


def cmd_train(cfg, out: Path) -> None:
    result = run_train(cfg)
    save_weights(out / WEIGHTS, result.model.state_dict())
    _write(out / "loss.txt", result.loss_curve())
    _write(out / "metrics.txt", result.report)
    _write(out / "config.txt", cfg.format())
    final = result.losses[-1] if result.losses else float("nan")
    print(f"steps {len(result.losses)} final_loss {final:.6e} masked_accuracy {result.accuracy:.6f} miou {result.miou:.6f}")


def cmd_eval(cfg, out: Path) -> None:
    report = run_eval(cfg, load_weights(out / WEIGHTS))
    _write(out / "eval.txt", report)
    sys.stdout.write(report)


def cmd_bench(cfg, out: Path) -> None:
    report = run_bench(cfg.bench, seed=cfg.train.seed)
    _write(out / "bench.txt", report)
    sys.stdout.write(report)


def cmd_viz(cfg, out: Path) -> None:
    model = build_model(cfg)
    model.load_state_dict(load_weights(out / WEIGHTS))
    paths = emit_images(model, generate_scene(cfg.scene), out / "viz")
    for p in paths:
        print(p)


COMMANDS = {"gen-scene": cmd_gen_scene, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "viz": cmd_viz}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevocc", description="Micro BEV occupancy pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key=value config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="overrides scene.seed and train.seed")
        p.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg = cfg.with_overrides(**{"scene.seed": args.seed, "train.seed": args.seed})
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {args.out}: {exc}") from exc
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except BevOccError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return 0
