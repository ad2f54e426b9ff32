"""Run the training-trend experiments (forecast vs Copy&Paste, pre-training, ego state).

Usage: python3 scripts/trend_experiments.py [forecast|pretrain|ego|all] [--out DIR]
Results are printed and written as JSON lines to DIR/trends.jsonl.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from occworld.scenegen import SceneSpec, generate_dataset
from occworld.train import TrainConfig, run_experiment


def forecast(out):
    scenes = generate_dataset(SceneSpec(seed=100, moving=4), 6, speeds=[1.0, 2.0, 3.0, 4.0])
    cfg = TrainConfig(f=3, pretrain_epochs=0, finetune_epochs=4, val_fraction=0.34, eval_stride=2)
    b = run_experiment(cfg, scenes, out / "forecast").bundle
    return {"experiment": "forecast", "miou": b.miou, "copy_paste": b.copy_paste_miou}


def pretrain(out):
    rows = []
    for seed in range(3):
        scenes = generate_dataset(SceneSpec(seed=200 + 10 * seed), 5)
        res = {}
        for epochs in (3, 0):
            cfg = TrainConfig(seed=seed, f=0, pretrain_epochs=epochs, finetune_epochs=2,
                              val_fraction=0.4, eval_stride=2)
            res[epochs] = run_experiment(cfg, scenes, out / f"pretrain_s{seed}_e{epochs}").bundle.miou[0]
        rows.append(res)
    return {"experiment": "pretrain", "with": [r[3] for r in rows], "without": [r[0] for r in rows]}


def ego(out, epochs=8):
    on, off = [], []
    for seed in range(3):
        scenes = generate_dataset(SceneSpec(seed=300 + 10 * seed, moving=4, ego_motion="stop_and_go"), 6,
                                  speeds=[1.5, 3.0, 4.5])
        for use, acc in ((True, on), (False, off)):
            cfg = TrainConfig(seed=seed, f=2, use_ego=use, pretrain_epochs=0, finetune_epochs=epochs,
                              val_fraction=0.34, eval_stride=2)
            acc.append(run_experiment(cfg, scenes).bundle.forecast_miou_avg)
    return {"experiment": "ego", "on": on, "off": off, "mean_on": float(np.mean(on)), "mean_off": float(np.mean(off))}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("which", nargs="?", default="all", choices=["forecast", "pretrain", "ego", "all"])
    ap.add_argument("--out", default="runs/trends")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    todo = ["forecast", "pretrain", "ego"] if args.which == "all" else [args.which]
    with open(out / "trends.jsonl", "a") as fh:
        for name in todo:
            t0 = time.perf_counter()
            row = globals()[name](out)
            row["seconds"] = round(time.perf_counter() - t0, 1)
            print(json.dumps(row))
            fh.write(json.dumps(row) + "\n")


if __name__ == "__main__":
    main()
