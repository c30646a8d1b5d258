import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planarmap.imaging import (
    CameraIntrinsics,
    DepthImage,
    ImageFormatError,
    InvalidDepthError,
    Pose,
    deproject_image,
    deproject_pixel,
    project_point,
    read_depth,
    read_intrinsics,
    transform_point,
    write_depth,
    write_intrinsics,
)

K500 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
K460 = CameraIntrinsics(460.0, 460.0, 320.0, 240.0, 640, 480)


def test_deproject_principal_ray():
    assert np.allclose(deproject_pixel(320, 240, 1000, K500), [0, 0, 1.0])


def test_deproject_45_degree_ray():
    assert np.allclose(deproject_pixel(820, 240, 2000, K500), [2.0, 0, 2.0])


def test_deproject_matches_scalar_pinhole():
    # scalar oracle: x = (u - cx) / fx * z
    z = 1.5
    expect = ((100 - 320) / 460 * z, (200 - 240) / 460 * z, z)
    got = deproject_pixel(100, 200, 1500, K460)
    assert np.allclose(got, expect, atol=1e-12)
    assert np.allclose(got, [-0.7174, -0.1304, 1.5], atol=5e-5)


def test_deproject_invalid_depth():
    with pytest.raises(InvalidDepthError):
        deproject_pixel(10, 10, 0, K460)


def test_deproject_image_matches_pixelwise():
    rng = np.random.default_rng(0)
    data = rng.integers(0, 3000, size=(6, 7)).astype(np.uint16)
    img = DepthImage(data)
    pts = deproject_image(img, K460)
    for v in range(6):
        for u in range(7):
            if data[v, u]:
                assert np.allclose(pts[v, u], deproject_pixel(u, v, data[v, u], K460))


def test_transform_identity():
    assert np.allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])


def test_transform_translation():
    assert np.allclose(transform_point(Pose(np.array([0, 0, 0.5])), [0, 0, 1]), [0, 0, 1.5])


def test_transform_yaw_90():
    assert np.allclose(transform_point(Pose.from_yaw(math.pi / 2), [1, 0, 0]), [0, 1, 0], atol=1e-12)


@given(
    u=st.floats(0, 639),
    v=st.floats(0, 479),
    depth=st.floats(1, 65535),
)
def test_deproject_reproject_roundtrip(u, v, depth):
    p = deproject_pixel(u, v, depth, K460)
    uu, vv = project_point(p, K460)
    assert abs(uu - u) < 1e-6 and abs(vv - v) < 1e-6
    assert abs(p[2] - depth / 1000.0) < 1e-12


quats = st.tuples(*[st.floats(-1, 1)] * 4).filter(lambda q: np.linalg.norm(q) > 1e-3)
vec3 = st.tuples(*[st.floats(-100, 100)] * 3)


@given(q=quats, t=vec3, p=vec3)
def test_transform_inverse_roundtrip(q, t, p):
    q = np.array(q) / np.linalg.norm(q)
    pose = Pose(np.array(t), q)
    back = transform_point(pose.inverse(), transform_point(pose, p))
    assert np.allclose(back, p, atol=1e-9)


def test_pose_rejects_non_unit_quaternion():
    with pytest.raises(ValueError):
        Pose(np.zeros(3), np.array([0, 0, 0, 1.1]))


def test_pose_record_roundtrip():
    pose = Pose.look_at((0.1, -0.9, 1.4), (0, 0.5, 0.2))
    back = Pose.from_record(pose.to_record(3.0))
    assert np.allclose(back.R, pose.R, atol=1e-12)
    assert np.allclose(back.translation, pose.translation)


@pytest.mark.parametrize("shape", [(2, 5), (5, 2)])
def test_depth_image_min_size(shape):
    with pytest.raises(ValueError):
        DepthImage(np.zeros(shape, np.uint16))


def test_depth_image_rejects_negative():
    with pytest.raises(ValueError):
        DepthImage(np.full((3, 3), -1.0))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 700, 1, 640, 480)


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_depth_file_roundtrip(tmp_path, suffix):
    rng = np.random.default_rng(1)
    data = rng.integers(0, 65536, size=(9, 11)).astype(np.uint16)
    path = tmp_path / f"d{suffix}"
    write_depth(path, DepthImage(data))
    assert np.array_equal(read_depth(path).data, data)


def test_pgm_8bit_and_comments(tmp_path):
    path = tmp_path / "d.pgm"
    path.write_bytes(b"P5\n# comment\n4 3\n255\n" + bytes(range(12)))
    assert np.array_equal(read_depth(path).data, np.arange(12).reshape(3, 4))


@pytest.mark.parametrize(
    "payload",
    [b"P2\n3 3\n255\n" + b"0 " * 9, b"P5\n3 3\n65535\n" + b"\x00" * 5, b"garbage"],
)
def test_pgm_format_errors(tmp_path, payload):
    path = tmp_path / "bad.pgm"
    path.write_bytes(payload)
    with pytest.raises(ImageFormatError):
        read_depth(path)


def test_intrinsics_file_roundtrip(tmp_path):
    path = tmp_path / "k.txt"
    write_intrinsics(path, K460)
    assert read_intrinsics(path) == K460


def test_intrinsics_file_errors(tmp_path):
    path = tmp_path / "k.txt"
    path.write_text("fx=1\nfy=1\ncx=1\n")
    with pytest.raises(ImageFormatError):
        read_intrinsics(path)
    path.write_text("fx=1\nbogus=2\n")
    with pytest.raises(ImageFormatError):
        read_intrinsics(path)
