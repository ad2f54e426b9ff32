"""Camera rays, cross-frame ray transport, and stratified sampling along rays."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, GridGeometry, Pose, relative_pose, transform_direction, transform_point

DEFAULT_T_NEAR = 0.1


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    frame: int = 0
    camera: int = 0
    pixel: tuple[int, int] = (0, 0)
    t_range: tuple[float, float] = (DEFAULT_T_NEAR, 1.0)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1) > 1e-6:
            raise ValueError("ray direction must be unit length")
        t_near, t_far = self.t_range
        if t_near < 0 or not t_far > t_near:
            raise ValueError(f"invalid t_range {self.t_range}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True, eq=False)
class RaySamples:
    ray: Ray
    depths: np.ndarray
    deltas: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.ray.at(self.depths)


@dataclass(eq=False)
class RayBundle:
    """Struct-of-arrays ray set, optionally carrying 2D labels per ray.

    Label conventions: depth 0 and semantic -1 mark pixels with no surface
    (the ray left the labelled volume); rgb lies in [0, 1].
    """

    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    frame: np.ndarray
    camera: np.ndarray
    pixel: np.ndarray
    depth: np.ndarray | None = None
    semantic: np.ndarray | None = None
    rgb: np.ndarray | None = None

    def __len__(self) -> int:
        return self.origins.shape[0]

    @classmethod
    def empty(cls) -> "RayBundle":
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return cls(z3, z3.copy(), np.zeros(0), np.zeros(0), zi, zi.copy(), np.zeros((0, 2), dtype=np.int64))

    @classmethod
    def from_rays(cls, rays: list[Ray]) -> "RayBundle":
        if not rays:
            return cls.empty()
        return cls(
            np.stack([r.origin for r in rays]),
            np.stack([r.direction for r in rays]),
            np.array([r.t_range[0] for r in rays]),
            np.array([r.t_range[1] for r in rays]),
            np.array([r.frame for r in rays]),
            np.array([r.camera for r in rays]),
            np.array([r.pixel for r in rays], dtype=np.int64).reshape(-1, 2),
        )

    def rays(self) -> list[Ray]:
        return [Ray(self.origins[i], self.dirs[i], int(self.frame[i]), int(self.camera[i]),
                    (int(self.pixel[i, 0]), int(self.pixel[i, 1])), (float(self.t_near[i]), float(self.t_far[i])))
                for i in range(len(self))]

    def subset(self, index) -> "RayBundle":
        pick = lambda a: None if a is None else a[index]
        return RayBundle(self.origins[index], self.dirs[index], self.t_near[index], self.t_far[index],
                         self.frame[index], self.camera[index], self.pixel[index],
                         pick(self.depth), pick(self.semantic), pick(self.rgb))

    @property
    def valid(self) -> np.ndarray:
        if self.semantic is None:
            raise ValueError("bundle carries no labels")
        return self.semantic >= 0

    @staticmethod
    def concat(bundles: list["RayBundle"]) -> "RayBundle":
        if not bundles:
            return RayBundle.empty()
        cat = lambda name: (None if getattr(bundles[0], name) is None
                            else np.concatenate([getattr(b, name) for b in bundles]))
        return RayBundle(*(cat(n) for n in ("origins", "dirs", "t_near", "t_far", "frame", "camera",
                                             "pixel", "depth", "semantic", "rgb")))


def pixel_grid(camera: CameraModel, stride: int) -> np.ndarray:
    """Integer pixel indices (n, 2) as (u, v), row-major over the strided image."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    us = np.arange(0, camera.width, stride)
    vs = np.arange(0, camera.height, stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def pixel_ray_arrays(camera: CameraModel, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions (ego frame) through pixel centers."""
    uv = pixels + 0.5
    x = (uv[:, 0] - camera.cx) / camera.fx
    y = (uv[:, 1] - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = transform_direction(camera.extrinsic, d_cam)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def pixel_rays(camera: CameraModel, stride: int = 1, frame: int = 0, camera_index: int = 0,
               t_range: tuple[float, float] = (DEFAULT_T_NEAR, 50.0)) -> list[Ray]:
    pixels = pixel_grid(camera, stride)
    origins, dirs = pixel_ray_arrays(camera, pixels)
    return [Ray(o, d, frame, camera_index, (int(p[0]), int(p[1])), t_range)
            for o, d, p in zip(origins, dirs, pixels)]


def camera_bundle(camera: CameraModel, stride: int, t_far: float, frame: int = 0,
                  camera_index: int = 0, t_near: float = DEFAULT_T_NEAR) -> RayBundle:
    pixels = pixel_grid(camera, stride)
    origins, dirs = pixel_ray_arrays(camera, pixels)
    n = len(pixels)
    return RayBundle(origins, dirs, np.full(n, t_near), np.full(n, t_far),
                     np.full(n, frame, dtype=np.int64), np.full(n, camera_index, dtype=np.int64), pixels)


def transport_bundle(bundle: RayBundle, from_pose: Pose, to_pose: Pose) -> RayBundle:
    """Re-express rays from the ``from`` ego frame in the ``to`` ego frame."""
    rel = relative_pose(from_pose, to_pose)
    dirs = transform_direction(rel, bundle.dirs)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return RayBundle(transform_point(rel, bundle.origins), dirs, bundle.t_near, bundle.t_far,
                     bundle.frame, bundle.camera, bundle.pixel, bundle.depth, bundle.semantic, bundle.rgb)


def transport_rays(rays: list[Ray], from_pose: Pose, to_pose: Pose) -> list[Ray]:
    return transport_bundle(RayBundle.from_rays(rays), from_pose, to_pose).rays()


def stratified_depths(t_near: np.ndarray, t_far: np.ndarray, m: int, jitter: bool = False,
                      rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(R, M) sample depths and intervals. Without jitter samples sit at bin midpoints.

    The last interval repeats the previous one (t_far - depth when M == 1).
    """
    if m < 1:
        raise ValueError("need at least one sample per ray")
    t_near = np.asarray(t_near, dtype=float)
    t_far = np.asarray(t_far, dtype=float)
    width = (t_far - t_near) / m
    offs = np.full((t_near.shape[0], m), 0.5)
    if jitter:
        offs = (rng if rng is not None else np.random.default_rng()).random((t_near.shape[0], m))
    depths = t_near[:, None] + (np.arange(m)[None, :] + offs) * width[:, None]
    deltas = np.empty_like(depths)
    if m == 1:
        deltas[:, 0] = t_far - depths[:, 0]
    else:
        deltas[:, :-1] = np.diff(depths, axis=1)
        deltas[:, -1] = deltas[:, -2]
    return depths, deltas


def sample_along(ray: Ray, m: int, jitter: bool = False, seed: int | None = 0) -> RaySamples:
    rng = np.random.default_rng(seed) if jitter else None
    depths, deltas = stratified_depths(np.array([ray.t_range[0]]), np.array([ray.t_range[1]]), m, jitter, rng)
    return RaySamples(ray, depths[0], deltas[0])


def default_t_far(geometry: GridGeometry) -> float:
    return geometry.diagonal


def adjacent_frames(i: int, n: int, num_frames: int) -> list[int]:
    """Frames i-n .. i+n clipped to the sequence."""
    return list(range(max(0, i - n), min(num_frames - 1, i + n) + 1))


def build_supervision_bundle(scene, i: int, n: int, stride: int, t_far: float | None = None,
                             cameras: list[int] | None = None) -> RayBundle:
    """Labelled rays from frames i-n..i+n, all expressed in frame i's ego frame.

    Raises ``MissingLabelsError`` naming the frame and camera when a label
    image is absent.
    """
    from .scenegen import MissingLabelsError

    geometry = scene.geometry
    t_far = default_t_far(geometry) if t_far is None else t_far
    to_pose = scene.frames[i].pose
    cams = range(len(scene.rig)) if cameras is None else cameras
    parts = []
    for j in adjacent_frames(i, n, len(scene.frames)):
        for c in cams:
            labels = scene.labels.get((j, c)) if scene.labels is not None else None
            if labels is None or labels.depth is None or labels.semantic is None or labels.rgb is None:
                raise MissingLabelsError(f"no baked labels for frame {j} camera {c}")
            b = camera_bundle(scene.rig[c], stride, t_far, frame=j, camera_index=c)
            u, v = b.pixel[:, 0], b.pixel[:, 1]
            b.depth = labels.depth[v, u].astype(float)
            sem = labels.semantic[v, u].astype(np.int64)
            b.semantic = np.where(sem == INVALID_SEMANTIC, -1, sem)
            b.rgb = labels.rgb[v, u].astype(float) / 255.0
            if j != i:
                b = transport_bundle(b, scene.frames[j].pose, to_pose)
            parts.append(b)
    return RayBundle.concat(parts)


INVALID_SEMANTIC = 255


def spherical_bundle(n_azimuth: int = 360, n_elevation: int = 20,
                     elevation_range: tuple[float, float] = (-30.0, 10.0),
                     origin=(0.0, 0.0, 0.0), t_far: float = 100.0) -> RayBundle:
    """Dense azimuth x elevation lattice of query rays from one origin."""
    az = np.arange(n_azimuth) * (2 * math.pi / n_azimuth)
    el = np.radians(np.linspace(elevation_range[0], elevation_range[1], n_elevation))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)
    n = dirs.shape[0]
    origins = np.broadcast_to(np.asarray(origin, dtype=float), dirs.shape).copy()
    zi = np.zeros(n, dtype=np.int64)
    return RayBundle(origins, dirs, np.zeros(n), np.full(n, t_far), zi, zi.copy(), np.zeros((n, 2), dtype=np.int64))
