"""Procedural driving scenes with ground-truth occupancy and baked 2D labels.

A scene is simulated in a world frame that coincides with the ego frame of
frame 0. Static objects are scattered along the ego route, moving boxes
travel at constant velocity, and every frame's ground truth is voxelized
in that frame's own ego frame. Baking casts every camera pixel against the
frame's grid to produce depth, semantic and shaded-albedo RGB images.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .formats import FormatError, read_grid, read_label, write_grid, write_label
from .geometry import (CameraModel, EgoState, GridGeometry, Pose, SemanticGrid, camera_mount,
                       inverse, transform_point)
from .raycast import cast_rays
from .raygen import INVALID_SEMANTIC, camera_bundle

TAXONOMY = ("others", "ground", "building", "pole", "car", "pedestrian", "barrier", "vegetation", "free")
OTHERS, GROUND, BUILDING, POLE, CAR, PEDESTRIAN, BARRIER, VEGETATION = range(8)
DYNAMIC_CATEGORIES = (CAR, PEDESTRIAN)

ALBEDO = np.array([
    [0.60, 0.45, 0.30],   # others
    [0.35, 0.35, 0.38],   # ground
    [0.80, 0.62, 0.50],   # building
    [0.95, 0.95, 0.20],   # pole
    [0.85, 0.15, 0.15],   # car
    [0.20, 0.40, 0.90],   # pedestrian
    [0.95, 0.55, 0.10],   # barrier
    [0.15, 0.70, 0.20],   # vegetation
    [0.00, 0.00, 0.00],   # free
])
SHADE_DISTANCE = 50.0
GROUND_TOP = -0.5
SCENE_FORMAT_VERSION = 1


class DataError(RuntimeError):
    """Missing or malformed scene data."""


class MissingLabelsError(DataError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    """Explicit object: box (or ellipsoid for vegetation) resting on the ground."""

    archetype: str
    center: tuple[float, float]          # world xy at t = 0
    size: tuple[float, float, float]     # length, width, height
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    category: int | None = None


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    geometry: GridGeometry = field(default_factory=GridGeometry.desk)
    num_frames: int = 20
    dt: float = 0.5
    num_classes: int = len(TAXONOMY)
    ground: bool = True
    buildings: int = 4
    parked: int = 3
    moving: int = 3
    poles: int = 4
    barriers: int = 2
    vegetation: int = 2
    others: int = 1
    moving_speed: tuple[float, float] = (1.0, 4.0)
    ego_motion: str = "straight"        # straight | arc | stop_and_go | static
    ego_speed: float = 3.0
    ego_yaw_rate: float = 0.08
    cameras: int = 2
    fov_deg: float = 90.0
    image_width: int = 48
    image_height: int = 32
    camera_height: float = 0.6
    history: int = 2
    future: int = 6
    objects: tuple[ObjectSpec, ...] = ()

    def __post_init__(self):
        if self.num_classes < len(TAXONOMY):
            raise ValueError(f"taxonomy needs at least {len(TAXONOMY)} classes")
        if self.num_frames < 1 or self.dt <= 0:
            raise ValueError("need at least one frame and a positive dt")
        if self.ego_motion not in ("straight", "arc", "stop_and_go", "static"):
            raise ValueError(f"unknown ego motion profile {self.ego_motion!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = {"dims": list(self.geometry.dims), "resolution": self.geometry.resolution,
                         "origin": list(self.geometry.origin)}
        d["objects"] = [asdict(o) for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "geometry" in d and isinstance(d["geometry"], dict):
            g = d["geometry"]
            d["geometry"] = GridGeometry(tuple(g["dims"]), g["resolution"], tuple(g["origin"]))
        if "objects" in d:
            d["objects"] = tuple(ObjectSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in o.items()})
                                 for o in d["objects"])
        for key in ("moving_speed",):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec fields {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class Frame:
    timestamp: float
    pose: Pose                  # ego-to-world
    ego: EgoState
    grid: SemanticGrid | None
    trajectory: np.ndarray      # (future, 2) waypoints in this frame's ego frame


@dataclass(eq=False)
class Labels:
    depth: np.ndarray | None      # (H, W) float32 meters along the ray, 0 = no surface
    semantic: np.ndarray | None   # (H, W) uint8, 255 = no surface
    rgb: np.ndarray | None        # (H, W, 3) uint8


@dataclass(eq=False)
class Scene:
    spec: SceneSpec
    rig: list[CameraModel]
    frames: list[Frame]
    labels: dict[tuple[int, int], Labels] | None = None
    taxonomy: tuple[str, ...] = TAXONOMY

    @property
    def geometry(self) -> GridGeometry:
        return self.spec.geometry

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def baked(self) -> bool:
        return self.labels is not None

    def images(self, i: int) -> list[np.ndarray]:
        """Camera images (sensor input) of frame ``i``."""
        out = []
        for c in range(len(self.rig)):
            lab = self.labels.get((i, c)) if self.labels is not None else None
            if lab is None or lab.rgb is None:
                raise MissingLabelsError(f"no image for frame {i} camera {c}")
            out.append(lab.rgb)
        return out

    def grid(self, i: int) -> SemanticGrid:
        g = self.frames[i].grid
        if g is None:
            raise DataError(f"no ground-truth grid loaded for frame {i}")
        return g

    def relative(self, src: int, dst: int) -> Pose:
        """Pose mapping frame ``src`` ego coordinates into frame ``dst`` ego coordinates."""
        from .geometry import relative_pose
        return relative_pose(self.frames[src].pose, self.frames[dst].pose)


# -- generation ----------------------------------------------------------------------

@dataclass
class _Body:
    archetype: str
    category: int
    center: np.ndarray      # world xyz at t=0 (box center)
    half: np.ndarray        # half extents
    yaw: float
    velocity: np.ndarray    # world xy velocity
    ellipsoid: bool = False


def _simulate_ego(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ego positions (n, 2), yaws (n,), times (n,) for frames -(k+1) .. num_frames-1+future."""
    first = -(spec.history + 1)
    last = spec.num_frames - 1 + spec.future
    times = np.arange(first, last + 1) * spec.dt
    sub = 20
    h = spec.dt / sub
    x = y = yaw = 0.0

    def speed(t):
        if spec.ego_motion == "static":
            return 0.0
        if spec.ego_motion == "stop_and_go":
            return spec.ego_speed * 0.5 * (1 - math.cos(2 * math.pi * t / 6.0))
        return spec.ego_speed

    omega = spec.ego_yaw_rate if spec.ego_motion == "arc" else 0.0
    idx0 = -first
    pos = np.zeros((len(times), 2))
    yaws = np.zeros(len(times))
    # forward from t=0
    for i in range(idx0 + 1, len(times)):
        t = times[i - 1]
        for s in range(sub):
            ts = t + s * h
            v = speed(ts + h / 2)
            yaw_mid = yaw + omega * h / 2
            x += v * math.cos(yaw_mid) * h
            y += v * math.sin(yaw_mid) * h
            yaw += omega * h
        pos[i] = (x, y)
        yaws[i] = yaw
    x = y = yaw = 0.0
    for i in range(idx0 - 1, -1, -1):
        t = times[i + 1]
        for s in range(sub):
            ts = t - s * h
            v = speed(ts - h / 2)
            yaw_mid = yaw - omega * h / 2
            x -= v * math.cos(yaw_mid) * h
            y -= v * math.sin(yaw_mid) * h
            yaw -= omega * h
        pos[i] = (x, y)
        yaws[i] = yaw
    return pos, yaws, times


_ARCHETYPES = {
    # name: (category, lateral range, length, width, height ranges)
    "building": (BUILDING, (5.5, 7.5), (3.0, 6.0), (1.5, 3.0), (2.0, 3.0)),
    "parked": (CAR, (3.5, 4.5), (3.8, 4.4), (1.7, 1.9), (1.4, 1.6)),
    "pole": (POLE, (4.5, 5.5), None, None, (2.5, 3.0)),
    "barrier": (BARRIER, (3.0, 4.0), (1.5, 2.5), (0.5, 0.6), (0.8, 1.0)),
    "vegetation": (VEGETATION, (5.0, 7.0), (1.6, 2.6), (1.6, 2.6), (1.6, 2.4)),
    "others": (OTHERS, (3.0, 6.0), (0.8, 1.2), (0.8, 1.2), (0.8, 1.2)),
    "moving": (CAR, (2.2, 2.8), (3.8, 4.4), (1.7, 1.9), (1.4, 1.6)),
    "pedestrian": (PEDESTRIAN, (4.0, 4.5), (0.6, 0.7), (0.6, 0.7), (1.6, 1.8)),
}
_ARCHETYPE_CATEGORY = {name: a[0] for name, a in _ARCHETYPES.items()}


def _check_fit(spec: SceneSpec, name: str, size) -> None:
    g = spec.geometry
    extent = g.resolution * np.asarray(g.dims, dtype=float)
    height_room = g.upper[2] - GROUND_TOP
    l, w, h = size
    if max(l, w) > min(extent[0], extent[1]) or h > height_room:
        raise ValueError(f"{name} of size {tuple(round(s, 2) for s in size)} does not fit the grid "
                         f"(extent {tuple(extent)}, {height_room:.2f} m above ground)")


def _place_objects(spec: SceneSpec, rng: np.random.Generator, pos: np.ndarray, yaws: np.ndarray) -> list[_Body]:
    bodies: list[_Body] = []
    route_lo, route_hi = 0, len(pos) - 1
    res = spec.geometry.resolution

    def route_point(u: float):
        f = route_lo + u * (route_hi - route_lo)
        i = int(min(math.floor(f), route_hi - 1)) if route_hi > route_lo else 0
        a = f - i
        j = min(i + 1, route_hi)
        p = (1 - a) * pos[i] + a * pos[j]
        yaw = yaws[i]
        return p, yaw

    def spawn(name: str, count: int, extend: float = 8.0):
        cat, lat, lr, wr, hr = _ARCHETYPES[name]
        for _ in range(count):
            if name == "pole":
                l = w = res
            else:
                l, w = rng.uniform(*lr), rng.uniform(*wr)
            h = rng.uniform(*hr)
            _check_fit(spec, name, (l, w, h))
            u = rng.uniform(0.0, 1.0)
            p, yaw = route_point(u)
            side = 1.0 if rng.random() < 0.5 else -1.0
            lateral = side * rng.uniform(*lat)
            along = rng.uniform(-extend, extend) if len(pos) < 3 else 0.0
            normal = np.array([-math.sin(yaw), math.cos(yaw)])
            tangent = np.array([math.cos(yaw), math.sin(yaw)])
            xy = p + lateral * normal + along * tangent
            velocity = np.zeros(2)
            if name in ("moving", "pedestrian"):
                lo, hi = spec.moving_speed if name == "moving" else (0.8, 1.5)
                velocity = rng.uniform(lo, hi) * (1.0 if rng.random() < 0.5 else -1.0) * tangent
            bodies.append(_Body(name, cat, np.array([xy[0], xy[1], GROUND_TOP + h / 2]),
                                np.array([l / 2, w / 2, h / 2]), yaw, velocity, ellipsoid=name == "vegetation"))

    spawn("building", spec.buildings)
    spawn("parked", spec.parked)
    spawn("pole", spec.poles)
    spawn("barrier", spec.barriers)
    spawn("vegetation", spec.vegetation)
    spawn("others", spec.others)
    n_ped = spec.moving // 3
    spawn("moving", spec.moving - n_ped)
    spawn("pedestrian", n_ped)
    for o in spec.objects:
        _check_fit(spec, o.archetype, o.size)
        cat = o.category if o.category is not None else _ARCHETYPE_CATEGORY.get(o.archetype, OTHERS)
        l, w, h = o.size
        bodies.append(_Body(o.archetype, cat, np.array([o.center[0], o.center[1], GROUND_TOP + h / 2]),
                            np.array([l / 2, w / 2, h / 2]), o.yaw, np.asarray(o.velocity, dtype=float),
                            ellipsoid=o.archetype == "vegetation"))
    return bodies


def _voxelize(spec: SceneSpec, bodies: list[_Body], pose: Pose, t: float) -> SemanticGrid:
    g = spec.geometry
    centers_ego = g.centers()
    cats = np.full(g.num_voxels, spec.num_classes - 1, dtype=np.uint8)
    world = transform_point(pose, centers_ego)
    if spec.ground:
        on_ground = (world[:, 2] >= GROUND_TOP - g.resolution) & (world[:, 2] < GROUND_TOP)
        cats[on_ground] = GROUND
    for b in bodies:
        c = b.center.copy()
        c[:2] += b.velocity * t
        d = world - c
        cy, sy = math.cos(b.yaw), math.sin(b.yaw)
        lx = cy * d[:, 0] + sy * d[:, 1]
        ly = -sy * d[:, 0] + cy * d[:, 1]
        lz = d[:, 2]
        if b.ellipsoid:
            inside = (lx / b.half[0]) ** 2 + (ly / b.half[1]) ** 2 + (lz / b.half[2]) ** 2 <= 1.0
        else:
            inside = ((lx >= -b.half[0]) & (lx < b.half[0]) & (ly >= -b.half[1]) & (ly < b.half[1])
                      & (lz >= -b.half[2]) & (lz < b.half[2]))
        cats[inside] = b.category
    return SemanticGrid(g, cats.reshape(g.dims), spec.num_classes)


def make_rig(spec: SceneSpec) -> list[CameraModel]:
    rig = []
    for c in range(spec.cameras):
        yaw = 2 * math.pi * c / spec.cameras
        mount = camera_mount(yaw, (0.0, 0.0, spec.camera_height))
        rig.append(CameraModel.from_fov(spec.image_width, spec.image_height, spec.fov_deg, mount))
    return rig


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def generate(spec: SceneSpec) -> Scene:
    """Deterministic unbaked scene from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    pos, yaws, times = _simulate_ego(spec)
    bodies = _place_objects(spec, rng, pos, yaws)
    offset = spec.history + 1
    poses = [Pose.from_yaw(float(yaws[i]), (pos[i, 0], pos[i, 1], 0.0)) for i in range(len(pos))]
    frames = []
    for f in range(spec.num_frames):
        i = f + offset
        pose = poses[i]
        to_ego = inverse(pose)
        spd = np.linalg.norm(pos[i] - pos[i - 1]) / spec.dt
        prev = np.linalg.norm(pos[i - 1] - pos[i - 2]) / spec.dt
        yaw_rate = _wrap(yaws[i] - yaws[i - 1]) / spec.dt
        hist = np.array([transform_point(to_ego, np.array([*pos[i - h], 0.0]))[:2]
                         for h in range(1, spec.history + 1)]).reshape(-1, 2)
        ego = EgoState(float(spd), float((spd - prev) / spec.dt), float(yaw_rate), hist,
                       np.ones(spec.history, dtype=bool))
        traj = np.array([transform_point(to_ego, np.array([*pos[i + h], 0.0]))[:2]
                         for h in range(1, spec.future + 1)]).reshape(-1, 2)
        grid = _voxelize(spec, bodies, pose, float(times[i]))
        frames.append(Frame(float(times[i]), pose, ego, grid, traj))
    return Scene(spec, make_rig(spec), frames)


# -- baking -------------------------------------------------------------------------------

def shade(categories: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """uint8 RGB: per-category albedo attenuated by exp(-depth / 50 m); misses are black."""
    valid = categories >= 0
    rgb = np.zeros(categories.shape + (3,))
    rgb[valid] = ALBEDO[categories[valid]] * np.exp(-depth[valid] / SHADE_DISTANCE)[:, None]
    return np.round(rgb * 255).astype(np.uint8)


def bake_frame(grid: SemanticGrid, camera: CameraModel) -> Labels:
    b = camera_bundle(camera, 1, t_far=np.inf)
    depth, cat = cast_rays(grid, b.origins, b.dirs)
    h, w = camera.height, camera.width
    valid = cat >= 0
    d = np.where(valid, depth, 0.0).astype(np.float32).reshape(h, w)
    sem = np.where(valid, cat, INVALID_SEMANTIC).astype(np.uint8).reshape(h, w)
    rgb = shade(cat.reshape(h, w), np.where(valid, depth, 0.0).reshape(h, w))
    return Labels(d, sem, rgb)


def bake_labels(scene: Scene) -> Scene:
    labels = {}
    for i, fr in enumerate(scene.frames):
        for c, cam in enumerate(scene.rig):
            labels[(i, c)] = bake_frame(scene.grid(i), cam)
    return replace(scene, labels=labels)


def visibility_mask(grid: SemanticGrid, rig: list[CameraModel], stride: int = 1) -> np.ndarray:
    """Voxels traversed by camera rays up to and including their first hit."""
    visited = np.zeros(grid.geometry.dims, dtype=bool)
    for cam in rig:
        b = camera_bundle(cam, stride, t_far=np.inf)
        cast_rays(grid, b.origins, b.dirs, visited=visited)
    return visited


# -- persistence --------------------------------------------------------------------------

def _pose_rows(p: Pose) -> list[list[float]]:
    return p.matrix()[:3].tolist()


def _pose_from_rows(rows) -> Pose:
    m = np.eye(4)
    m[:3] = np.asarray(rows, dtype=float)
    return Pose.from_matrix(m)


def _label_paths(root: Path, i: int, c: int) -> dict[str, Path]:
    stem = root / "labels" / f"frame_{i:04d}_cam{c}"
    return {"depth": stem.with_name(stem.name + ".depth.f32"),
            "sem": stem.with_name(stem.name + ".sem.u8"),
            "rgb": stem.with_name(stem.name + ".rgb.u8")}


def save_scene(scene: Scene, directory) -> Path:
    root = Path(directory)
    (root / "grids").mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": SCENE_FORMAT_VERSION,
        "spec": scene.spec.to_dict(),
        "taxonomy": list(scene.taxonomy),
        "num_classes": scene.num_classes,
        "baked": scene.baked,
        "rig": [{"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
                 "extrinsic": _pose_rows(c.extrinsic)} for c in scene.rig],
        "frames": [{"timestamp": f.timestamp, "pose": _pose_rows(f.pose),
                    "ego": {"speed": f.ego.speed, "acceleration": f.ego.acceleration, "yaw_rate": f.ego.yaw_rate,
                            "history": f.ego.history.tolist(), "history_valid": f.ego.history_valid.tolist()},
                    "trajectory": f.trajectory.tolist()} for f in scene.frames],
    }
    (root / "scene.json").write_text(json.dumps(meta, indent=1))
    for i, f in enumerate(scene.frames):
        if f.grid is not None:
            write_grid(root / "grids" / f"frame_{i:04d}.occg", f.grid)
    if scene.labels is not None:
        (root / "labels").mkdir(exist_ok=True)
        for (i, c), lab in sorted(scene.labels.items()):
            paths = _label_paths(root, i, c)
            for kind, arr in (("depth", lab.depth), ("sem", lab.semantic), ("rgb", lab.rgb)):
                if arr is not None:
                    write_label(paths[kind], kind, arr)
    return root


def load_scene(directory, include=("grids", "images", "labels")) -> Scene:
    """Read a scene directory.

    ``include`` selects what to read: ``grids`` (3D ground truth), ``images``
    (camera RGB) and ``labels`` (2D depth and semantic maps). Anything not
    included is left as None, so a training stage cannot touch it.
    """
    root = Path(directory)
    meta_path = root / "scene.json"
    if not meta_path.exists():
        raise DataError(f"{meta_path}: scene.json not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{meta_path}: malformed JSON ({e})") from e
    if meta.get("format_version") != SCENE_FORMAT_VERSION:
        raise DataError(f"{meta_path}: scene format version {meta.get('format_version')} unsupported")
    try:
        spec = SceneSpec.from_dict(meta["spec"])
        rig = [CameraModel(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"],
                           _pose_from_rows(c["extrinsic"])) for c in meta["rig"]]
        frames_meta = meta["frames"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{meta_path}: malformed scene metadata ({e})") from e
    frames = []
    for i, fm in enumerate(frames_meta):
        grid = None
        if "grids" in include:
            try:
                grid = read_grid(root / "grids" / f"frame_{i:04d}.occg", spec.num_classes)
            except (FileNotFoundError, FormatError) as e:
                raise DataError(str(e)) from e
        e = fm["ego"]
        ego = EgoState(e["speed"], e["acceleration"], e["yaw_rate"], np.asarray(e["history"]).reshape(-1, 2),
                       np.asarray(e["history_valid"], dtype=bool))
        frames.append(Frame(fm["timestamp"], _pose_from_rows(fm["pose"]), ego, grid,
                            np.asarray(fm["trajectory"], dtype=float).reshape(-1, 2)))
    labels = None
    if meta.get("baked") and ("images" in include or "labels" in include):
        labels = {}
        for i in range(len(frames)):
            for c in range(len(rig)):
                paths = _label_paths(root, i, c)
                try:
                    rgb = read_label(paths["rgb"], "rgb") if "images" in include else None
                    depth = read_label(paths["depth"], "depth") if "labels" in include else None
                    sem = read_label(paths["sem"], "sem") if "labels" in include else None
                except FileNotFoundError as e:
                    raise MissingLabelsError(f"frame {i} camera {c}: {e}") from e
                except FormatError as e:
                    raise DataError(str(e)) from e
                labels[(i, c)] = Labels(depth, sem, rgb)
    return Scene(spec, rig, frames, labels, tuple(meta.get("taxonomy", TAXONOMY)))


def generate_dataset(base: SceneSpec, count: int, speeds=None, bake: bool = True) -> list[Scene]:
    """``count`` scenes with seeds base.seed + i; ``speeds`` optionally cycles ego speeds."""
    scenes = []
    for i in range(count):
        spec = replace(base, seed=base.seed + i)
        if speeds:
            spec = replace(spec, ego_speed=float(speeds[i % len(speeds)]))
        s = generate(spec)
        scenes.append(bake_labels(s) if bake else s)
    return scenes
