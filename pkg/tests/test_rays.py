import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occworld.geometry import CameraModel, GridGeometry, Pose, SemanticGrid, camera_mount, transform_point
from occworld.raycast import cast_rays, ray_box, ray_cast_first_hit, traverse
from occworld.raygen import (Ray, RayBundle, adjacent_frames, build_supervision_bundle, camera_bundle,
                             pixel_rays, sample_along, spherical_bundle, stratified_depths, transport_rays)
from test_geometry import random_pose, random_rotation


def fine_step_voxels(geometry, origin, direction, step_frac=0.01):
    """Brute-force marcher: voxel sequence visited by tiny steps along the ray."""
    t0, t1 = ray_box(geometry, origin[None], direction[None])
    if not t0[0] < t1[0]:
        return []
    ts = np.arange(t0[0], t1[0], step_frac * geometry.resolution) + 1e-9
    ijk = geometry.points_to_voxels(origin + ts[:, None] * direction)
    ijk = ijk[(ijk >= 0).all(axis=1)]
    seq = [tuple(ijk[0])] if len(ijk) else []
    for v in map(tuple, ijk[1:]):
        if v != seq[-1]:
            seq.append(v)
    return seq


def random_ray(rng, geometry):
    origin = geometry.origin + rng.uniform(-0.5, 1.5, size=3) * (geometry.upper - geometry.origin)
    target = geometry.origin + rng.uniform(0, 1, size=3) * (geometry.upper - geometry.origin)
    d = target - origin
    return origin, d / np.linalg.norm(d)


def test_traverse_matches_fine_step_marcher():
    rng = np.random.default_rng(0)
    g = GridGeometry((8, 7, 5), 0.5, (-2.0, -1.5, -1.0))
    step = 0.01 * g.resolution
    for _ in range(100):
        o, d = random_ray(rng, g)
        dda = [v for v, _ in traverse(g, o, d)]
        brute = fine_step_voxels(g, o, d)
        # the marcher may only skip voxels whose chord is shorter than its step
        kept = []
        for v in dda:
            lo = g.origin + np.array(v) * g.resolution
            t0, t1 = ray_box(g, o[None], d[None], lo, lo + g.resolution)
            if v in brute or t1[0] - t0[0] >= step:
                kept.append(v)
        assert kept == brute


def test_first_hit_single_voxel_analytic_depth():
    g = GridGeometry((8, 8, 8), 0.5, (0.0, 0.0, 0.0))
    cats = np.full(g.dims, 8, dtype=np.uint8)
    cats[5, 3, 3] = 4
    grid = SemanticGrid(g, cats, 9)
    o = np.array([0.1, 1.75, 1.8])
    d = np.array([1.0, 0.0, 0.02])
    d /= np.linalg.norm(d)
    hit = ray_cast_first_hit(grid, Ray(o, d, t_range=(0.0, 10.0)))
    lo, hi = np.array([2.5, 1.5, 1.5]), np.array([3.0, 2.0, 2.0])
    t_enter, _ = ray_box(g, o[None], d[None], lo, hi)
    assert hit is not None and hit[1] == 4
    assert abs(hit[0] - t_enter[0]) < 1e-5


def test_first_hit_empty_grid_misses():
    g = GridGeometry((4, 4, 4), 1.0, (0, 0, 0))
    grid = SemanticGrid.empty(g, 9)
    assert ray_cast_first_hit(grid, Ray(np.array([0.5, 0.5, 0.5]), np.array([1.0, 0, 0]), t_range=(0, 9))) is None


def test_cast_rays_depth_within_voxel_diagonal_of_marcher():
    rng = np.random.default_rng(5)
    g = GridGeometry((10, 10, 6), 0.5, (-2.5, -2.5, -1.5))
    cats = np.where(rng.random(g.dims) < 0.1, rng.integers(0, 8, g.dims), 8).astype(np.uint8)
    grid = SemanticGrid(g, cats, 9)
    o = np.tile([0.1, 0.2, 0.05], (200, 1))
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    depth, cat = cast_rays(grid, o, d)
    for i in range(200):
        seq = fine_step_voxels(g, o[i], d[i])
        occ = [v for v in seq if cats[v] != 8]
        if not occ:
            assert cat[i] == -1
            continue
        assert cat[i] == cats[occ[0]]
        lo = g.origin + np.array(occ[0]) * g.resolution
        t_enter, _ = ray_box(g, o[i][None], d[i][None], lo, lo + g.resolution)
        assert abs(depth[i] - t_enter[0]) < 1e-9


def test_visited_marks_path_up_to_first_hit():
    g = GridGeometry((6, 1, 1), 1.0, (0, 0, 0))
    cats = np.full(g.dims, 8, dtype=np.uint8)
    cats[3, 0, 0] = 1
    visited = np.zeros(g.dims, dtype=bool)
    cast_rays(SemanticGrid(g, cats, 9), [[0.5, 0.5, 0.5]], [[1.0, 0, 0]], visited=visited)
    assert visited[:, 0, 0].tolist() == [True, True, True, True, False, False]


# -- raygen --------------------------------------------------------------------------

def test_pixel_rays_tiny_image():
    cam = CameraModel(2.0, 2.0, 1.0, 1.0, 2, 2)
    rays = pixel_rays(cam, 1)
    assert len(rays) == 4
    assert all(np.array_equal(r.origin, cam.center) for r in rays)


def test_principal_point_ray_is_forward_axis():
    cam = CameraModel(10.0, 10.0, 2.5, 1.5, 5, 3, camera_mount(0.3, (1, 2, 0.5)))
    ray = [r for r in pixel_rays(cam, 1) if r.pixel == (2, 1)][0]
    fwd = cam.extrinsic.rotation[:, 2]
    assert np.allclose(ray.direction, fwd)


@pytest.mark.parametrize("stride", [1, 3, 5])
def test_pixel_ray_count_and_reprojection(stride):
    rng = np.random.default_rng(stride)
    cam = CameraModel(40.0, 38.0, 23.0, 15.5, 48, 32, Pose(random_rotation(rng), rng.normal(size=3)))
    rays = pixel_rays(cam, stride)
    assert len(rays) == math.ceil(48 / stride) * math.ceil(32 / stride)
    for r in rays[:: max(1, len(rays) // 40)]:
        assert abs(np.linalg.norm(r.direction) - 1) < 1e-6
        uv, z = cam.project(r.at(3.0)[None])
        assert np.allclose(uv[0], np.array(r.pixel) + 0.5, atol=1e-4)


def test_transport_identity_and_pure_translation():
    cam = CameraModel.from_fov(8, 6, 90, camera_mount(0.0, (0, 0, 0.6)))
    rays = pixel_rays(cam, 2)
    p = Pose.from_yaw(0.2, (3, 1, 0))
    same = transport_rays(rays, p, p)
    assert all(np.allclose(a.origin, b.origin, atol=1e-6) and np.allclose(a.direction, b.direction, atol=1e-6)
               for a, b in zip(rays, same))
    moved = transport_rays(rays, Pose.identity(), Pose(np.eye(3), np.array([2.0, 0, 0])))
    for a, b in zip(rays, moved):
        assert np.allclose(b.origin, a.origin - [2, 0, 0]) and np.allclose(b.direction, a.direction)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_transport_preserves_world_points(seed):
    rng = np.random.default_rng(seed)
    cam = CameraModel.from_fov(6, 4, 70, random_pose(rng))
    rays = pixel_rays(cam, 1)
    a, b = random_pose(rng), random_pose(rng)
    moved = transport_rays(rays, a, b)
    ts = np.array([0.3, 1.0, 2.5, 7.0, 20.0])
    for r0, r1 in zip(rays, moved):
        assert abs(np.linalg.norm(r1.direction) - 1) < 1e-6
        assert np.allclose(transform_point(a, r0.at(ts)), transform_point(b, r1.at(ts)), atol=1e-5)


def test_sample_along_midpoints():
    s = sample_along(Ray(np.zeros(3), np.array([1.0, 0, 0]), t_range=(0.0, 2.0)), 1)
    assert s.depths.tolist() == [1.0] and s.deltas.tolist() == [1.0]
    s = sample_along(Ray(np.zeros(3), np.array([1.0, 0, 0]), t_range=(0.0, 4.0)), 4)
    assert s.depths.tolist() == [0.5, 1.5, 2.5, 3.5] and s.deltas.tolist() == [1, 1, 1, 1]


@given(st.integers(0, 2 ** 31), st.integers(1, 40), st.floats(0.0, 5.0), st.floats(0.1, 50.0))
def test_jittered_samples_stay_in_strata(seed, m, t0, span):
    ray = Ray(np.zeros(3), np.array([0, 0, 1.0]), t_range=(t0, t0 + span))
    a = sample_along(ray, m, jitter=True, seed=seed)
    b = sample_along(ray, m, jitter=True, seed=seed)
    assert np.array_equal(a.depths, b.depths)
    edges = t0 + span * np.arange(m + 1) / m
    assert np.all(a.depths >= edges[:-1] - 1e-9) and np.all(a.depths <= edges[1:] + 1e-9)
    assert np.all(np.diff(a.depths) > 0)
    if m > 1:
        assert np.allclose(a.deltas[:-1], np.diff(a.depths)) and a.deltas[-1] == a.deltas[-2]


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0]))
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 0, 0]), t_range=(2.0, 1.0))


def test_adjacent_frames_clip():
    assert adjacent_frames(0, 1, 5) == [0, 1]
    assert adjacent_frames(2, 1, 5) == [1, 2, 3]
    assert adjacent_frames(4, 2, 5) == [2, 3, 4]


def test_spherical_bundle_unit_dirs():
    b = spherical_bundle(36, 5)
    assert len(b) == 180 and np.allclose(np.linalg.norm(b.dirs, axis=1), 1)


def test_bundle_concat_and_subset():
    cam = CameraModel.from_fov(4, 4, 90, Pose.identity())
    b = camera_bundle(cam, 1, 10.0)
    both = RayBundle.concat([b, b])
    assert len(both) == 32 and len(both.subset(np.arange(5))) == 5
    assert len(RayBundle.concat([])) == 0
