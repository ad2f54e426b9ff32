"""Two-stage training (2D rendering pre-training, 3D fine-tuning), evaluation,
self-supervised occupancy extraction, and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import FeatureGrid, SemanticGrid
from .losses import (FrameLabels, LossLog, LossWeights, occupancy_3d_loss, temporal_2d_loss,
                     trajectory_l2_loss)
from .metrics import (RAYIOU_THRESHOLDS, ConfusionCounts, RayIoUReport, collision_rate, confusion,
                      planning_l2, ray_iou, summarize)
from .nets import (AdamState, AttributeProjection, ForecastModule, OccupancyHead, SceneEncoder,
                   TrajectoryHead, adam_step, predict, zero_grads)
from .raygen import build_supervision_bundle, spherical_bundle
from .render import AttributeFields, render_bundle_tensors
from .scenegen import DYNAMIC_CATEGORIES, DataError, Scene, load_scene, visibility_mask

STAGES = ("pretrain", "finetune", "joint")


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    k: int = 2
    f: int = 3
    n: int = 1
    m: int = 48
    stride: int = 4
    pretrain_epochs: int = 2
    finetune_epochs: int = 4
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = True
    tau: float = 2.0
    use_ego: bool = True
    residual: bool = True
    feature_dim: int = 32
    pixel_dim: int = 16
    hidden: int = 64
    forecast_hidden: int = 128
    forecast_layers: int = 2
    density_bias: float = -2.0
    jitter: bool = True
    val_fraction: float = 0.25
    eval_stride: int = 1
    rayiou_azimuths: int = 90
    rayiou_elevations: int = 8

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.f < 0 or self.k < 0 or self.n < 0:
            raise ValueError("k, f and n must be >= 0")
        if self.m < 1 or self.stride < 1 or self.eval_stride < 1:
            raise ValueError("m, stride and eval_stride must be >= 1")
        if not self.tau > 0:
            raise ValueError("density threshold tau must be > 0")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0 or not self.lr > 0:
            raise ValueError("epochs must be >= 0 and lr > 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        d = dict(d)
        if "weights" in d:
            w = d["weights"]
            unknown_w = set(w) - set(LossWeights.__dataclass_fields__)
            if unknown_w:
                raise ValueError(f"unknown loss weights {sorted(unknown_w)}")
            d["weights"] = LossWeights(**w)
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())

    def architecture(self) -> dict:
        keys = ("k", "f", "use_ego", "residual", "feature_dim", "pixel_dim", "hidden",
                "forecast_hidden", "forecast_layers")
        return {key: getattr(self, key) for key in keys}


# -- model ------------------------------------------------------------------------------

class WorldModel:
    """Encoder N, projection head P, occupancy head H, forecaster F and trajectory head."""

    def __init__(self, scene: Scene, config: TrainConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.geometry = scene.geometry
        self.rig = list(scene.rig)
        self.num_classes = scene.num_classes
        c = config
        self.encoder = SceneEncoder(self.geometry, self.rig, c.feature_dim, c.pixel_dim, c.hidden, rng=rng)
        self.projection = AttributeProjection(c.feature_dim, self.num_classes, c.hidden, rng=rng,
                                              density_bias=c.density_bias)
        self.occupancy = OccupancyHead(c.feature_dim, self.num_classes, c.hidden, rng=rng)
        self.forecaster = ForecastModule(self.geometry, c.feature_dim, c.forecast_hidden, c.forecast_layers,
                                         use_ego=c.use_ego, k=c.k, residual=c.residual, rng=rng)
        self.trajectory = TrajectoryHead(c.feature_dim, max(c.f, 1), k=c.k, use_ego=c.use_ego, rng=rng)

    def components(self) -> dict[str, dict[str, Tensor]]:
        return {"encoder": self.encoder.named_parameters(),
                "projection": self.projection.named_parameters(),
                "occupancy": self.occupancy.named_parameters(),
                "forecaster": self.forecaster.named_parameters(),
                "trajectory": self.trajectory.named_parameters()}

    def named_parameters(self, parts=None) -> dict[str, Tensor]:
        comps = self.components()
        out = {}
        for name in (parts if parts is not None else comps):
            out.update(comps[name])
        return out

    def fingerprint(self) -> str:
        meta = {"arch": self.config.architecture(), "dims": list(self.geometry.dims),
                "resolution": self.geometry.resolution, "origin": list(self.geometry.origin),
                "classes": self.num_classes,
                "rig": [[c.fx, c.fy, c.cx, c.cy, c.width, c.height] for c in self.rig]}
        return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]

    def encode(self, scene: Scene, i: int) -> FeatureGrid:
        return self.encoder(scene.images(i))

    def features(self, scene: Scene, i: int, horizon: int) -> list[FeatureGrid]:
        """Features for frames i .. i+horizon. Every forecast step sees the ego state at i."""
        grid = self.encode(scene, i)
        out = [grid]
        ego = scene.frames[i].ego if self.forecaster.use_ego else None
        for _ in range(horizon):
            grid = self.forecaster(grid, ego)
            out.append(grid)
        return out


def extract_occupancy_selfsup(fields_: AttributeFields, tau: float, num_classes: int | None = None) -> SemanticGrid:
    """Voxel = argmax semantic logit where density >= tau, free elsewhere."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    sem = fields_.semantics.data
    num_classes = sem.shape[1] if num_classes is None else num_classes
    free = num_classes - 1
    cats = np.where(fields_.density.data >= tau, np.argmax(sem, axis=1), free)
    return SemanticGrid(fields_.geometry, cats.reshape(fields_.geometry.dims), num_classes)


# -- steps ---------------------------------------------------------------------------------

def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{what} is not finite ({value})")


class Trainer:
    """Owns a model, its optimizer state and label-ray caches."""

    def __init__(self, model: WorldModel, config: TrainConfig, log: LossLog | None = None):
        self.model = model
        self.config = config
        self.adam = AdamState()
        self.step = 0
        self.log = log
        self.rng = np.random.default_rng(config.seed + 1)
        self._bundles: dict[tuple[int, int], object] = {}

    def _bundle(self, scene: Scene, i: int):
        key = (id(scene), i)
        if key not in self._bundles:
            self._bundles[key] = build_supervision_bundle(scene, i, self.config.n, self.config.stride)
        return self._bundles[key]

    def _finish(self, loss: Tensor, params: dict[str, Tensor], stage: str, parts: dict[str, float]) -> float:
        value = loss.item()
        _check_finite(value, f"{stage} loss")
        zero_grads(self.model.named_parameters())
        loss.backward()
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"{stage} gradient of {name} is not finite")
        adam_step(params, self.config.lr, self.adam)
        self.step += 1
        if self.log is not None:
            self.log.append(self.step, stage, {"total": value, **parts})
        return value

    def pretrain_step(self, scene: Scene, i: int) -> float:
        """Temporal 2D rendering loss over frames i .. i+f; the occupancy head is not in the graph."""
        c = self.config
        horizon = min(c.f, len(scene.frames) - 1 - i)
        feats = self.model.features(scene, i, horizon)
        frames = []
        for t, grid in enumerate(feats):
            fields_ = self.model.projection(grid)
            bundle = self._bundle(scene, i + t)
            out = render_bundle_tensors(fields_, bundle, c.m, jitter=c.jitter, rng=self.rng)
            frames.append((out, FrameLabels(bundle.depth, bundle.semantic, bundle.rgb)))
        parts: dict[str, float] = {}
        loss = temporal_2d_loss(frames, c.weights, parts)
        params = self.model.named_parameters(["encoder", "projection", "forecaster"])
        return self._finish(loss, params, "pretrain", parts)

    def finetune_step(self, scene: Scene, i: int, joint: bool = False) -> float:
        """3D occupancy loss over frames i .. i+f (plus the trajectory loss in joint mode).
        The projection head is bypassed."""
        c = self.config
        horizon = min(c.f, len(scene.frames) - 1 - i)
        feats = self.model.features(scene, i, horizon)
        parts: dict[str, float] = {}
        total = None
        for t, grid in enumerate(feats):
            logits = self.model.occupancy(grid)
            comp: dict[str, float] = {}
            term = occupancy_3d_loss(logits, scene.grid(i + t).categories.ravel(), c.weights,
                                     scene.num_classes - 1, comp)
            for k_, v in comp.items():
                parts[k_] = parts.get(k_, 0.0) + v
            total = term if total is None else total + term
        names = ["encoder", "forecaster", "occupancy"]
        if joint and c.weights.trajectory > 0 and c.f > 0:
            frame = scene.frames[i]
            gt = frame.trajectory[:c.f]
            if gt.shape[0] == c.f:
                pred = self.model.trajectory(feats[0], frame.ego if c.use_ego else None)
                traj = trajectory_l2_loss(pred, gt)
                parts["trajectory"] = traj.item()
                total = total + traj * c.weights.trajectory
                names.append("trajectory")
        return self._finish(total, self.model.named_parameters(names), "joint" if joint else "finetune", parts)

    def run_stage(self, stage: str, scenes: list[Scene], epochs: int) -> list[float]:
        """Epoch means of the stage loss. Frame order is shuffled per epoch."""
        samples = [(si, i) for si, s in enumerate(scenes) for i in range(len(s.frames))]
        history = []
        for _ in range(epochs):
            order = self.rng.permutation(len(samples))
            losses = []
            for idx in order:
                si, i = samples[idx]
                if stage == "pretrain":
                    losses.append(self.pretrain_step(scenes[si], i))
                else:
                    losses.append(self.finetune_step(scenes[si], i, joint=stage == "joint"))
            history.append(float(np.mean(losses)) if losses else float("nan"))
        return history


# -- evaluation --------------------------------------------------------------------------------

def _nan_to_none(values) -> list:
    return [None if (v is None or (isinstance(v, float) and math.isnan(v))) else float(v) for v in values]


@dataclass
class EvalBundle:
    horizons: list[int]
    miou: list[float]                  # index h: frame T+h
    geo_iou: list[float]
    per_class: list[list[float | None]]
    copy_paste_miou: list[float]       # index h-1: current prediction vs frame T+h
    copy_paste_geo_iou: list[float]
    rayiou: dict[str, float]
    l2: dict[str, float]
    collision: dict[str, float]
    samples: int
    miou_visible: float = float("nan")
    mode: str = "head"

    def to_dict(self) -> dict:
        return {"miou": _nan_to_none([self.miou[0]])[0],
                "per_category_iou": _nan_to_none(self.per_class[0]),
                "iou_geo": _nan_to_none([self.geo_iou[0]])[0],
                "miou_visible": _nan_to_none([self.miou_visible])[0],
                "rayiou": self.rayiou, "l2": self.l2, "collision": self.collision,
                "forecast": {"horizons": self.horizons, "miou": _nan_to_none(self.miou),
                             "iou_geo": _nan_to_none(self.geo_iou),
                             "per_category_iou": [_nan_to_none(p) for p in self.per_class],
                             "copy_paste_miou": _nan_to_none(self.copy_paste_miou),
                             "copy_paste_iou_geo": _nan_to_none(self.copy_paste_geo_iou)},
                "samples": self.samples, "mode": self.mode}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        """Flat ``key,value`` form of :meth:`to_dict`."""
        rows = ["key,value"]

        def walk(prefix, value):
            if isinstance(value, dict):
                for k_ in sorted(value):
                    walk(f"{prefix}.{k_}" if prefix else str(k_), value[k_])
            elif isinstance(value, list):
                for i, v in enumerate(value):
                    walk(f"{prefix}.{i}", v)
            else:
                rows.append(f"{prefix},{'' if value is None else value}")

        walk("", self.to_dict())
        return "\n".join(rows) + "\n"

    @property
    def forecast_miou_avg(self) -> float:
        return float(np.mean(self.miou[1:])) if len(self.miou) > 1 else float("nan")


def predict_frames(model: WorldModel, scene: Scene, i: int, horizon: int, selfsup: bool = False,
                   tau: float | None = None) -> list[SemanticGrid]:
    """Predicted grids for frames i .. i+horizon."""
    with ag.no_grad():
        feats = model.features(scene, i, horizon)
        out = []
        for grid in feats:
            if selfsup:
                out.append(extract_occupancy_selfsup(model.projection(grid), tau or model.config.tau,
                                                     model.num_classes))
            else:
                out.append(predict(model.occupancy(grid), model.geometry, model.num_classes))
    return out


def evaluate(model: WorldModel, scenes: list[Scene], selfsup: bool = False, tau: float | None = None,
             horizon: int | None = None) -> EvalBundle:
    c = model.config
    f = c.f if horizon is None else horizon
    num_classes = model.num_classes
    free = num_classes - 1
    counts = [ConfusionCounts.zeros(num_classes) for _ in range(f + 1)]
    cp_counts = [ConfusionCounts.zeros(num_classes) for _ in range(f)]
    rays = spherical_bundle(c.rayiou_azimuths, c.rayiou_elevations, origin=(0.0, 0.0, 0.0),
                            t_far=model.geometry.diagonal)
    visible_counts = ConfusionCounts.zeros(num_classes)
    ray_report: RayIoUReport | None = None
    traj_pred, traj_gt, coll_grids, coll_tf = [], [], [], []
    samples = 0
    for scene in scenes:
        for i in range(0, len(scene.frames) - f, c.eval_stride):
            preds = predict_frames(model, scene, i, f, selfsup, tau)
            samples += 1
            for h in range(f + 1):
                counts[h] = counts[h] + confusion(preds[h], scene.grid(i + h))
            for h in range(1, f + 1):
                cp_counts[h - 1] = cp_counts[h - 1] + confusion(preds[0], scene.grid(i + h))
            vis = visibility_mask(scene.grid(i), scene.rig)
            visible_counts = visible_counts + confusion(preds[0], scene.grid(i), vis)
            rep = ray_iou(preds[0], scene.grid(i), rays)
            ray_report = rep if ray_report is None else ray_report + rep
            if f > 0 and scene.frames[i].trajectory.shape[0] >= f:
                with ag.no_grad():
                    feats0 = model.encode(scene, i)
                    wp = model.trajectory(feats0, scene.frames[i].ego if c.use_ego else None).data
                traj_pred.append(wp[:f].astype(float))
                traj_gt.append(scene.frames[i].trajectory[:f])
                coll_grids.append([scene.grid(i + h) for h in range(1, f + 1)])
                coll_tf.append([scene.relative(i, i + h) for h in range(1, f + 1)])
    summaries = [summarize(ct, free) for ct in counts]
    cp = [summarize(ct, free) for ct in cp_counts]
    l2, coll = {}, {}
    if traj_pred:
        steps = tuple(range(1, min(f, 3) + 1))
        l2 = planning_l2(np.stack(traj_pred), np.stack(traj_gt), steps)
        coll = collision_rate(np.stack(traj_pred), coll_grids, DYNAMIC_CATEGORIES, frame_transforms=coll_tf)
    return EvalBundle(
        horizons=list(range(f + 1)),
        miou=[s[0] for s in summaries],
        geo_iou=[s[2] for s in summaries],
        per_class=[list(s[1]) for s in summaries],
        copy_paste_miou=[s[0] for s in cp],
        copy_paste_geo_iou=[s[2] for s in cp],
        rayiou=ray_report.as_dict() if ray_report is not None else {},
        l2=l2, collision=coll, samples=samples, miou_visible=summarize(visible_counts, free)[0], mode="selfsup" if selfsup else "head")


# -- checkpoints ----------------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"OCKP1"


class CheckpointError(DataError):
    pass


def save_checkpoint(path, model: WorldModel, adam: AdamState | None = None, step: int = 0) -> None:
    """``OCKP1`` | u32 header length | JSON header | f32 payloads in header order (little-endian)."""
    params = model.named_parameters()
    entries = [{"name": n, "shape": list(p.shape), "section": "param"} for n, p in params.items()]
    arrays = [p.data for p in params.values()]
    if adam is not None:
        for n in params:
            if n in adam.m:
                for sec, store in (("adam_m", adam.m), ("adam_v", adam.v)):
                    entries.append({"name": n, "shape": list(store[n].shape), "section": sec})
                    arrays.append(store[n])
    header = {"fingerprint": model.fingerprint(), "config": model.config.to_dict(), "step": step,
              "adam_step": adam.step if adam is not None else 0, "entries": entries}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}, expected {CHECKPOINT_MAGIC!r}")
    (n,) = struct.unpack_from("<I", raw, 5)
    try:
        header = json.loads(raw[9:9 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header ({e})") from e
    off = 9 + n
    tables = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = off + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        tables[(e["section"], e["name"])] = np.frombuffer(raw[off:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, tables


def load_checkpoint(path, model: WorldModel, adam: AdamState | None = None) -> dict:
    """Copy parameters (and optionally Adam state) into ``model``; returns the header."""
    header, tables = read_checkpoint(path)
    if header["fingerprint"] != model.fingerprint():
        raise CheckpointError(f"{path}: checkpoint fingerprint {header['fingerprint']} does not match "
                              f"model {model.fingerprint()}")
    for name, p in model.named_parameters().items():
        arr = tables.get(("param", name))
        if arr is None:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: shape {arr.shape} for {name}, expected {p.shape}")
        p.data[...] = arr
    if adam is not None:
        adam.step = header.get("adam_step", 0)
        adam.m = {n: a.copy() for (sec, n), a in tables.items() if sec == "adam_m"}
        adam.v = {n: a.copy() for (sec, n), a in tables.items() if sec == "adam_v"}
    return header


# -- experiments ----------------------------------------------------------------------------------

STAGE_INCLUDE = {
    "pretrain": ("images", "labels"),
    "finetune": ("grids", "images"),
    "joint": ("grids", "images"),
    "eval": ("grids", "images"),
}


def scene_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "scene.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "scene.json").exists()) if root.is_dir() else []
    if not dirs:
        raise DataError(f"{root}: no scene directories found")
    return dirs


def load_scenes(root, stage: str) -> list[Scene]:
    """Scenes with only the data ``stage`` is allowed to see."""
    return [load_scene(d, STAGE_INCLUDE[stage]) for d in scene_dirs(root)]


def split_indices(count: int, seed: int, val_fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic train/val split; at least one scene on each side when count >= 2."""
    if count < 2:
        return list(range(count)), list(range(count))
    perm = np.random.default_rng(seed).permutation(count)
    n_val = min(count - 1, max(1, int(round(val_fraction * count))))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def _restrict(scene: Scene, include) -> Scene:
    labels = None
    if scene.labels is not None and ("images" in include or "labels" in include):
        from .scenegen import Labels
        labels = {k: Labels(v.depth if "labels" in include else None,
                            v.semantic if "labels" in include else None,
                            v.rgb if "images" in include else None) for k, v in scene.labels.items()}
    frames = [replace(fr, grid=fr.grid if "grids" in include else None) for fr in scene.frames]
    return replace(scene, frames=frames, labels=labels)


@dataclass
class ExperimentResult:
    bundle: EvalBundle
    selfsup: EvalBundle | None
    history: dict[str, list[float]]
    model: WorldModel
    train: list[int]
    val: list[int]


def run_experiment(config: TrainConfig, scenes, out_dir=None, init_checkpoint=None,
                   evaluate_selfsup: bool = False) -> ExperimentResult:
    """Run the configured stages on the train split and evaluate on the val split.

    ``scenes`` is a directory of scene directories or a list of in-memory
    scenes. Stage ``pretrain`` runs pre-training only; ``finetune``/``joint``
    run pre-training first when ``pretrain_epochs > 0``, then fine-tuning.
    Each stage only sees the data it is entitled to.
    """
    if isinstance(scenes, (str, Path)):
        dirs = scene_dirs(scenes)
        count = len(dirs)
        loader = lambda idx, stage: [load_scene(dirs[j], STAGE_INCLUDE[stage]) for j in idx]
    else:
        scenes = list(scenes)
        count = len(scenes)
        loader = lambda idx, stage: [_restrict(scenes[j], STAGE_INCLUDE[stage]) for j in idx]
    train_idx, val_idx = split_indices(count, config.seed, config.val_fraction)
    out = Path(out_dir) if out_dir is not None else None
    log = LossLog(out / "losses.csv") if out is not None else None
    history: dict[str, list[float]] = {}
    val = loader(val_idx, "eval")
    model = WorldModel(val[0], config)
    if init_checkpoint is not None:
        load_checkpoint(init_checkpoint, model)
    trainer = Trainer(model, config, log)
    try:
        if config.pretrain_epochs > 0:
            history["pretrain"] = trainer.run_stage("pretrain", loader(train_idx, "pretrain"), config.pretrain_epochs)
            if out is not None:
                save_checkpoint(out / "pretrain.ckpt", model, trainer.adam, trainer.step)
        if config.stage != "pretrain" and config.finetune_epochs > 0:
            trainer.adam = AdamState()
            stage = config.stage
            history[stage] = trainer.run_stage(stage, loader(train_idx, stage), config.finetune_epochs)
            if out is not None:
                save_checkpoint(out / f"{stage}.ckpt", model, trainer.adam, trainer.step)
    finally:
        if out is not None and history:
            (out / "history.json").write_text(json.dumps(history, indent=1))
    bundle = evaluate(model, val)
    selfsup = evaluate(model, val, selfsup=True) if evaluate_selfsup else None
    if out is not None:
        (out / "config.json").write_text(config.to_json())
        (out / "eval.json").write_text(bundle.to_json())
        (out / "eval.csv").write_text(bundle.to_csv())
        if selfsup is not None:
            (out / "eval_selfsup.json").write_text(selfsup.to_json())
    return ExperimentResult(bundle, selfsup, history, model, train_idx, val_idx)
