"""Command-line entry point: scene generation, baking, training, evaluation, forecasting, rendering."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .formats import FormatError, write_grid
from .raygen import camera_bundle, default_t_far
from .render import render_bundle_tensors
from .scenegen import ALBEDO, DataError, SceneSpec, bake_labels, generate, load_scene, save_scene
from .train import (STAGE_INCLUDE, NumericError, Trainer, TrainConfig, WorldModel, evaluate,
                    load_checkpoint, load_scenes, predict_frames, read_checkpoint, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 image from an (H, W, 3) uint8 array."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 image from an (H, W) uint8 array."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def bev_image(categories: np.ndarray, free_id: int) -> np.ndarray:
    """Top-down view: colour of the highest occupied voxel per column (x up, y left)."""
    x, y, z = categories.shape
    occ = categories != free_id
    top = np.where(occ.any(axis=2), z - 1 - np.argmax(occ[:, :, ::-1], axis=2), -1)
    img = np.zeros((x, y, 3), dtype=np.uint8)
    ii, jj = np.nonzero(top >= 0)
    cats = categories[ii, jj, top[ii, jj]]
    palette = np.vstack([ALBEDO, np.zeros((max(0, free_id + 1 - len(ALBEDO)), 3))])
    img[ii, jj] = np.round(palette[np.minimum(cats, len(palette) - 1)] * 255).astype(np.uint8)
    return img[::-1, ::-1]


def _model_from_checkpoint(ckpt, scene) -> WorldModel:
    header, _ = read_checkpoint(ckpt)
    config = TrainConfig.from_dict(header["config"])
    model = WorldModel(scene, config)
    load_checkpoint(ckpt, model)
    return model


def cmd_gen(args) -> int:
    spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SceneSpec()
    save_scene(generate(spec), args.out)
    print(f"wrote scene to {args.out}")
    return EXIT_OK


def cmd_bake(args) -> int:
    scene = load_scene(args.scene, include=("grids",))
    save_scene(bake_labels(scene), args.scene)
    print(f"baked {len(scene.frames)} frames x {len(scene.rig)} cameras in {args.scene}")
    return EXIT_OK


def cmd_train(args) -> int:
    stage = args.command
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    config = replace(config, stage=stage)
    data_stage = "pretrain" if stage == "pretrain" else stage
    scenes = load_scenes(args.scenes, data_stage)
    model = WorldModel(scenes[0], config)
    if args.init:
        load_checkpoint(args.init, model)
    out = Path(args.out)
    from .losses import LossLog
    trainer = Trainer(model, config, LossLog(out.with_suffix(".losses.csv")))
    epochs = config.pretrain_epochs if stage == "pretrain" else config.finetune_epochs
    history = trainer.run_stage(stage, scenes, epochs)
    save_checkpoint(out, model, trainer.adam, trainer.step)
    print(json.dumps({"stage": stage, "epoch_loss": history}))
    return EXIT_OK


def cmd_eval(args) -> int:
    scenes = load_scenes(args.scenes, "eval")
    model = _model_from_checkpoint(args.ckpt, scenes[0])
    bundle = evaluate(model, scenes, selfsup=args.selfsup, tau=args.tau)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(bundle.to_json())
    print(f"mIoU per horizon {bundle.miou}; report in {args.report}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    scene = load_scene(args.scene, include=STAGE_INCLUDE["eval"])
    model = _model_from_checkpoint(args.ckpt, scene)
    if not 0 <= args.frame < len(scene.frames):
        raise UsageError(f"frame {args.frame} outside 0..{len(scene.frames) - 1}")
    grids = predict_frames(model, scene, args.frame, args.horizon, args.selfsup, args.tau)
    out = Path(args.out or Path(args.scene) / "forecast")
    out.mkdir(parents=True, exist_ok=True)
    for h, g in enumerate(grids):
        write_grid(out / f"frame_{args.frame:04d}_h{h}.occg", g)
        if args.dump_ppm:
            write_ppm(out / f"frame_{args.frame:04d}_h{h}.ppm", bev_image(g.categories, g.free_id))
    print(f"wrote {len(grids)} grids to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    scene = load_scene(args.scene, include=("images",))
    model = _model_from_checkpoint(args.ckpt, scene)
    if not 0 <= args.camera < len(scene.rig):
        raise UsageError(f"camera {args.camera} outside 0..{len(scene.rig) - 1}")
    cam = scene.rig[args.camera]
    with ag.no_grad():
        fields_ = model.projection(model.encode(scene, args.frame))
        bundle = camera_bundle(cam, 1, default_t_far(scene.geometry))
        r = render_bundle_tensors(fields_, bundle, model.config.m)
    h, w = cam.height, cam.width
    out = Path(args.out or Path(args.scene) / "render")
    stem = f"frame_{args.frame:04d}_cam{args.camera}"
    depth = r.depth.data.reshape(h, w)
    d8 = np.round(255 * np.clip(depth / scene.geometry.diagonal, 0, 1)).astype(np.uint8)
    write_pgm(out / f"{stem}_depth.pgm", d8)
    color = np.clip(r.color.data, 0, 1)
    write_ppm(out / f"{stem}_rgb.ppm", np.round(255 * color).reshape(h, w, 3))
    sem = np.argmax(r.semantics.data, axis=1)
    palette = np.vstack([ALBEDO, np.zeros((max(0, scene.num_classes - len(ALBEDO)), 3))])
    write_ppm(out / f"{stem}_sem.ppm", np.round(palette[sem.reshape(h, w)] * 255))
    rows = ["u,v,depth,opacity,semantic,r,g,b"]
    for n, (u, v) in enumerate(bundle.pixel):
        rows.append(f"{u},{v},{depth.flat[n]:.6g},{r.opacity.data[n]:.6g},{sem[n]},"
                    + ",".join(f"{x:.6g}" for x in color[n]))
    (out / f"{stem}.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote renders to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occworld", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    g = sub.add_parser("gen", help="generate an unbaked scene")
    g.add_argument("--spec")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)
    b = sub.add_parser("bake", help="bake 2D labels for a scene")
    b.add_argument("--scene", required=True)
    b.set_defaults(func=cmd_bake)
    for stage in ("pretrain", "finetune", "joint"):
        t = sub.add_parser(stage, help=f"run the {stage} stage")
        t.add_argument("--config")
        t.add_argument("--scenes", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--init", help="warm-start checkpoint")
        t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--selfsup", action="store_true")
    e.add_argument("--tau", type=float)
    e.set_defaults(func=cmd_eval)
    f = sub.add_parser("forecast", help="forecast future occupancy")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--scene", required=True)
    f.add_argument("--frame", type=int, required=True)
    f.add_argument("--horizon", type=int, required=True)
    f.add_argument("--dump-ppm", action="store_true")
    f.add_argument("--selfsup", action="store_true")
    f.add_argument("--tau", type=float)
    f.add_argument("--out")
    f.set_defaults(func=cmd_forecast)
    r = sub.add_parser("render", help="render attribute fields through a camera")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
