"""Voxel lattices, rigid poses, pinhole cameras and ego kinematic state.

Conventions:
  * Every grid is expressed in the ego frame of its timestamp (x forward,
    y left, z up). ``origin`` is the minimum corner of the lattice.
  * Voxel arrays have shape (X, Y, Z); flattened voxel index is
    ``(i * Y + j) * Z + k`` (numpy C order).
  * Binning is half-open: a point on the max face is outside.
  * Cameras use the OpenCV frame (x right, y down, z forward); the pixel
    with integer index (u, v) has its center at (u + 0.5, v + 0.5).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor

NUM_CLASSES_REFERENCE = 18


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    resolution: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if not self.resolution > 0:
            raise ValueError(f"grid resolution must be > 0, got {self.resolution}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"grid origin must have 3 components, got {self.origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "origin", origin)

    @classmethod
    def reference(cls) -> "GridGeometry":
        """Occ3D-nuScenes layout: 200x200x16 at 0.4 m covering [-40,40]x[-40,40]x[-1,5.4]."""
        return cls((200, 200, 16), 0.4, (-40.0, -40.0, -1.0))

    @classmethod
    def desk(cls) -> "GridGeometry":
        return cls((32, 32, 8), 0.5, (-8.0, -8.0, -1.0))

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.resolution * np.asarray(self.dims)

    @property
    def diagonal(self) -> float:
        return float(self.resolution * np.linalg.norm(self.dims))

    def voxel_center(self, i: int, j: int, k: int) -> np.ndarray:
        return np.asarray(self.origin) + self.resolution * (np.array([i, j, k], dtype=float) + 0.5)

    def centers(self) -> np.ndarray:
        """All voxel centers as an (X*Y*Z, 3) array in flattened voxel order."""
        axes = [self.origin[a] + self.resolution * (np.arange(self.dims[a]) + 0.5) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def normalized_centers(self) -> np.ndarray:
        """Voxel centers mapped to [-1, 1] per axis."""
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), -1).reshape(-1, 3)
        return (idx + 0.5) / np.asarray(self.dims) * 2.0 - 1.0

    def world_to_voxel(self, p) -> tuple[int, int, int] | None:
        idx = self.points_to_voxels(np.asarray(p, dtype=float)[None])[0]
        if idx[0] < 0:
            return None
        return int(idx[0]), int(idx[1]), int(idx[2])

    def points_to_voxels(self, points: np.ndarray) -> np.ndarray:
        """Floor-bin (n, 3) points; rows outside the grid come back as (-1, -1, -1)."""
        q = np.floor((np.asarray(points, dtype=float) - np.asarray(self.origin)) / self.resolution)
        inside = np.all((q >= 0) & (q < np.asarray(self.dims)), axis=1)
        out = np.full(q.shape, -1, dtype=np.int64)
        out[inside] = q[inside].astype(np.int64)
        return out

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        _, y, z = self.dims
        return (ijk[..., 0] * y + ijk[..., 1]) * z + ijk[..., 2]


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    geometry: GridGeometry
    categories: np.ndarray
    num_classes: int = NUM_CLASSES_REFERENCE

    def __post_init__(self):
        cats = np.asarray(self.categories)
        if cats.shape != self.geometry.dims:
            raise ValueError(f"category array shape {cats.shape} != grid dims {self.geometry.dims}")
        if not 2 <= self.num_classes <= 256:
            raise ValueError("num_classes must be in [2, 256]")
        if cats.size and (cats.min() < 0 or cats.max() >= self.num_classes):
            raise ValueError(f"category ids must lie in [0, {self.num_classes})")
        object.__setattr__(self, "categories", _frozen(cats, np.uint8))

    @property
    def free_id(self) -> int:
        return self.num_classes - 1

    @classmethod
    def empty(cls, geometry: GridGeometry, num_classes: int) -> "SemanticGrid":
        return cls(geometry, np.full(geometry.dims, num_classes - 1, dtype=np.uint8), num_classes)

    def occupied(self) -> np.ndarray:
        return self.categories != self.free_id

    def __eq__(self, other) -> bool:
        return (isinstance(other, SemanticGrid) and self.geometry == other.geometry
                and self.num_classes == other.num_classes
                and np.array_equal(self.categories, other.categories))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Per-voxel feature vectors stored as a (num_voxels, D) tensor."""

    geometry: GridGeometry
    features: Tensor

    def __post_init__(self):
        f = self.features
        if not isinstance(f, Tensor):
            f = Tensor(f)
            object.__setattr__(self, "features", f)
        if f.ndim != 2 or f.shape[0] != self.geometry.num_voxels or f.shape[1] < 1:
            raise ValueError(f"features must be ({self.geometry.num_voxels}, D>=1), got {f.shape}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# -- rigid transforms -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("Pose needs a 3x3 rotation and a 3-vector translation")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.asarray(translation, float))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other) -> bool:
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None

    def allclose(self, other: "Pose", atol: float = 1e-6) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


def compose(a: Pose, b: Pose) -> Pose:
    """a after b: transform_point(compose(a, b), p) == transform_point(a, transform_point(b, p))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def transform_point(a: Pose, p) -> np.ndarray:
    """Apply to a 3-vector or an (..., 3) array of points."""
    p = np.asarray(p, dtype=float)
    return p @ a.rotation.T + a.translation


def transform_direction(a: Pose, d) -> np.ndarray:
    return np.asarray(d, dtype=float) @ a.rotation.T


def relative_pose(from_pose: Pose, to_pose: Pose) -> Pose:
    """Map coordinates of the ``from`` ego frame into the ``to`` ego frame (poses are ego-to-world)."""
    return compose(inverse(to_pose), from_pose)


# -- cameras --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose.identity)  # camera-to-ego

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float, extrinsic: Pose) -> "CameraModel":
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, extrinsic)

    @property
    def center(self) -> np.ndarray:
        return np.array(self.extrinsic.translation)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CameraModel)
                and (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
                == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
                and self.extrinsic == other.extrinsic)

    __hash__ = None

    def project(self, points_ego) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame points (n, 3) -> continuous pixel coordinates (n, 2) and camera depth z (n,)."""
        pc = transform_point(inverse(self.extrinsic), np.atleast_2d(points_ego))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def unproject(self, uv, depth) -> np.ndarray:
        """Continuous pixel coordinates and camera depth z -> ego-frame points."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        depth = np.broadcast_to(np.asarray(depth, dtype=float), uv.shape[:1])
        x = (uv[:, 0] - self.cx) / self.fx * depth
        y = (uv[:, 1] - self.cy) / self.fy * depth
        return transform_point(self.extrinsic, np.stack([x, y, depth], axis=1))

    def in_frustum(self, points_ego) -> np.ndarray:
        uv, z = self.project(points_ego)
        return (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)


def camera_mount(yaw: float, position) -> Pose:
    """Camera-to-ego pose for a level camera looking along ego heading ``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return Pose(np.stack([right, down, forward], axis=1), np.asarray(position, dtype=float))


# -- ego state ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EgoState:
    speed: float
    acceleration: float
    yaw_rate: float
    history: np.ndarray            # (k, 2) past waypoints, most recent first, current ego frame
    history_valid: np.ndarray      # (k,) False where the waypoint is zero padding

    def __post_init__(self):
        h = np.asarray(self.history, dtype=float).reshape(-1, 2)
        v = np.asarray(self.history_valid, dtype=bool).reshape(-1)
        if v.shape[0] != h.shape[0]:
            raise ValueError("history_valid must have one flag per history waypoint")
        h = np.where(v[:, None], h, 0.0)
        object.__setattr__(self, "history", _frozen(h))
        object.__setattr__(self, "history_valid", _frozen(v, bool))

    @classmethod
    def zeros(cls, k: int) -> "EgoState":
        return cls(0.0, 0.0, 0.0, np.zeros((k, 2)), np.zeros(k, dtype=bool))

    @property
    def k(self) -> int:
        return self.history.shape[0]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.speed, self.acceleration, self.yaw_rate], self.history.ravel()])

    def __eq__(self, other) -> bool:
        return (isinstance(other, EgoState)
                and (self.speed, self.acceleration, self.yaw_rate) == (other.speed, other.acceleration, other.yaw_rate)
                and np.array_equal(self.history, other.history)
                and np.array_equal(self.history_valid, other.history_valid))

    __hash__ = None
