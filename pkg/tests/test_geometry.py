import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occworld.formats import (FormatError, VersionError, decode_label, decode_occg, encode_label,
                              encode_occg, read_field, read_grid, read_label, write_field, write_grid,
                              write_label, KIND_CATEGORY)
from occworld.geometry import (CameraModel, EgoState, GridGeometry, Pose, SemanticGrid, camera_mount,
                               compose, inverse, relative_pose, transform_point)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_pose(rng):
    return Pose(random_rotation(rng), rng.normal(size=3) * 5)


def test_world_to_voxel_first_voxel():
    g = GridGeometry((4, 4, 4), 0.4, (0.0, 0.0, 0.0))
    assert g.world_to_voxel(np.array([0.2, 0.2, 0.2])) == (0, 0, 0)


def test_world_to_voxel_max_corner_is_outside():
    g = GridGeometry((4, 4, 4), 0.4, (0.0, 0.0, 0.0))
    assert g.world_to_voxel(g.upper) is None


def test_reference_config_ego_center_bin():
    assert GridGeometry.reference().world_to_voxel((0.0, 0.0, 0.0)) == (100, 100, 2)


@given(st.integers(0, 31), st.integers(0, 31), st.integers(0, 7))
def test_voxel_center_round_trip(i, j, k):
    g = GridGeometry.desk()
    assert g.world_to_voxel(g.voxel_center(i, j, k)) == (i, j, k)


def test_geometry_validation():
    with pytest.raises(ValueError):
        GridGeometry((0, 2, 2), 0.5, (0, 0, 0))
    with pytest.raises(ValueError):
        GridGeometry((2, 2, 2), 0.0, (0, 0, 0))


def test_points_to_voxels_flags_outside():
    g = GridGeometry((2, 2, 2), 1.0, (0, 0, 0))
    out = g.points_to_voxels(np.array([[0.5, 0.5, 0.5], [2.0, 0.5, 0.5], [-0.1, 0, 0]]))
    assert out[0].tolist() == [0, 0, 0] and (out[1:] == -1).all()


def test_pose_identity_and_translation_inverse():
    a = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
    assert compose(Pose.identity(), a).allclose(a)
    assert np.allclose(inverse(a).translation, [-1, -2, -3])


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_pose_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
    assert compose(a, inverse(a)).allclose(Pose.identity())
    assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)))
    # homogeneous-matrix oracle
    assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)
    p = rng.normal(size=3)
    assert np.allclose(transform_point(compose(a, b), p), transform_point(a, transform_point(b, p)), atol=1e-6)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


def test_relative_pose_maps_between_frames():
    rng = np.random.default_rng(3)
    a, b = random_pose(rng), random_pose(rng)
    p_a = rng.normal(size=3)
    world = transform_point(a, p_a)
    assert np.allclose(transform_point(relative_pose(a, b), p_a), transform_point(inverse(b), world))


def test_camera_project_unproject_round_trip():
    rng = np.random.default_rng(1)
    cam = CameraModel(60.0, 55.0, 24.0, 16.0, 48, 32, Pose(random_rotation(rng), rng.normal(size=3)))
    uv = rng.uniform([0, 0], [48, 32], size=(50, 2))
    depth = rng.uniform(0.5, 20, size=50)
    pts = cam.unproject(uv, depth)
    uv2, z = cam.project(pts)
    assert np.allclose(uv2, uv, atol=1e-6) and np.allclose(z, depth)
    assert cam.in_frustum(pts).all()
    assert np.allclose(cam.unproject(uv2, z), pts, atol=1e-5)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(-1, 1, 2, 2, 4, 4)
    with pytest.raises(ValueError):
        CameraModel(1, 1, 5, 2, 4, 4)


def test_camera_mount_looks_forward():
    cam = CameraModel.from_fov(48, 32, 90, camera_mount(0.0, (0, 0, 0.6)))
    uv, z = cam.project(np.array([[10.0, 0.0, 0.6]]))
    assert np.allclose(uv, [[24, 16]]) and z[0] == pytest.approx(10)
    uv, _ = cam.project(np.array([[10.0, 1.0, 0.6]]))  # left of the axis -> smaller u
    assert uv[0, 0] < 24


def test_ego_state_padding_is_zeroed():
    e = EgoState(1.0, 0.0, 0.0, np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([True, False]))
    assert e.history[1].tolist() == [0.0, 0.0]
    assert e.to_vector().shape == (7,)
    assert EgoState.zeros(2).to_vector().tolist() == [0.0] * 7


# -- OCCG ---------------------------------------------------------------------------

def test_occg_category_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    g = GridGeometry.reference()
    grid = SemanticGrid(g, rng.integers(0, 18, size=g.dims).astype(np.uint8))
    write_grid(tmp_path / "a.occg", grid)
    back = read_grid(tmp_path / "a.occg", 18)
    assert back == grid and back.geometry == g
    assert encode_occg(back.geometry, back.categories, KIND_CATEGORY) == (tmp_path / "a.occg").read_bytes()


def test_occg_is_x_fastest():
    g = GridGeometry((2, 3, 1), 1.0, (0, 0, 0))
    cats = np.zeros((2, 3, 1), dtype=np.uint8)
    cats[1, 0, 0] = 7
    cats[0, 1, 0] = 9
    body = encode_occg(g, cats, KIND_CATEGORY)[-6:]
    assert list(body) == [0, 7, 9, 0, 0, 0]


@pytest.mark.parametrize("shape", [(3, 2, 4), (3, 2, 4, 5)])
def test_occg_float_fields_round_trip(tmp_path, shape):
    g = GridGeometry((3, 2, 4), 0.4, (-40.0, -40.0, -1.0))
    vals = np.random.default_rng(2).normal(size=shape).astype(np.float32)
    write_field(tmp_path / "f.occg", g, vals)
    g2, v2 = read_field(tmp_path / "f.occg")
    assert g2 == g and np.array_equal(v2, vals)


def test_occg_errors(tmp_path):
    g = GridGeometry((2, 2, 2), 0.5, (0, 0, 0))
    data = bytearray(encode_occg(g, np.zeros((2, 2, 2), np.uint8), KIND_CATEGORY))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        decode_occg(bad, "bad.occg")
    data[4] = 2
    with pytest.raises(VersionError, match="version"):
        decode_occg(bytes(data))
    with pytest.raises(FormatError):
        decode_occg(bytes(data[:20]))
    with pytest.raises(FileNotFoundError):
        read_grid(tmp_path / "missing.occg", 9)


@pytest.mark.parametrize("kind,arr", [
    ("depth", np.random.default_rng(0).uniform(0, 10, (4, 5)).astype(np.float32)),
    ("sem", np.random.default_rng(0).integers(0, 255, (4, 5)).astype(np.uint8)),
    ("rgb", np.random.default_rng(0).integers(0, 255, (4, 5, 3)).astype(np.uint8)),
])
def test_label_round_trip(tmp_path, kind, arr):
    raw = encode_label(kind, arr)
    assert len(raw) == 16 + arr.nbytes
    write_label(tmp_path / "x", kind, arr)
    assert np.array_equal(read_label(tmp_path / "x", kind), arr)
    with pytest.raises(FormatError):
        decode_label("sem" if kind != "sem" else "rgb", raw)
