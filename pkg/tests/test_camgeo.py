import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from worldscan.camgeo import (
    CameraPose, ChannelSplit, Intrinsics, Ray, camera_ray_transform, latent_ray_transforms,
    load_raymap, pack_raymaps, plucker_raymap, ray_local_basis, raymap_from_bytes,
    raymap_to_bytes, rope_rotate, save_raymap, ucpe_apply, ucpe_output, unpack_raymaps, unproject,
)
from worldscan.errors import DegenerateBasisError, InvalidInputError

INTR = Intrinsics(fx=500.0, fy=480.0, cx=320.0, cy=240.0, w=640, h=480)


def random_pose(rng, spread=3.0):
    return CameraPose(Rotation.random(random_state=rng).as_matrix(), spread * rng.standard_normal(3))


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_pose_validation():
    with pytest.raises(InvalidInputError):
        CameraPose(2 * np.eye(3), np.zeros(3))
    with pytest.raises(InvalidInputError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_intrinsics_validation():
    with pytest.raises(InvalidInputError):
        Intrinsics(0, 1, 1, 1, 2, 2)
    with pytest.raises(InvalidInputError):
        Intrinsics(1, 1, 3, 1, 2, 2)


def test_unproject_axis_and_45deg():
    ray = unproject((INTR.cx, INTR.cy), INTR, CameraPose.identity())
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-15)
    ray = unproject((INTR.cx + INTR.fx, INTR.cy), INTR, CameraPose.identity())
    np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15)


def test_unproject_random_poses(rng):
    for _ in range(100):
        pose = random_pose(rng)
        ray = unproject(rng.uniform(0, 640, 2), INTR, pose)
        assert abs(np.linalg.norm(ray.direction) - 1) < 1e-12
        np.testing.assert_array_equal(ray.origin, pose.o)


def test_ray_local_basis_hand_values():
    ray = Ray(np.zeros(3), np.array([0.0, 0, 1]))
    tr = ray_local_basis(ray, np.array([0.0, 1, 0]))
    # x = up x z = (0,1,0) x (0,0,1) = (1,0,0); y = z x x = (0,1,0)
    np.testing.assert_allclose(tr.rotation, np.eye(3), atol=1e-15)


def test_ray_local_basis_properties(rng):
    for _ in range(100):
        pose = random_pose(rng)
        ray = unproject(rng.uniform(0, 640, 2), INTR, pose)
        tr = camera_ray_transform(ray, pose)
        rot = tr.rotation
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(rot) - 1) < 1e-9
        np.testing.assert_allclose(tr.d @ tr.inverse(), np.eye(4), atol=1e-9)
        p = np.append(ray.origin + ray.direction, 1.0)
        np.testing.assert_allclose(tr.d @ p, [0, 0, 1, 1], atol=1e-12)


def test_degenerate_up_and_fallback():
    ray = Ray(np.zeros(3), np.array([0.0, 1, 0]))
    with pytest.raises(DegenerateBasisError):
        ray_local_basis(ray, np.array([0.0, 1, 0]))
    # identity pose: up is +y, so a ray straight along y falls back to the camera x axis
    tr = camera_ray_transform(ray, CameraPose.identity())
    np.testing.assert_allclose(tr.rotation[2], [0, 1, 0])
    np.testing.assert_allclose(tr.rotation[0], np.cross([1, 0, 0], [0, 1, 0]))


def test_channel_split():
    assert ChannelSplit.default(112) == ChannelSplit(56, 56)
    assert ChannelSplit.default(20) == ChannelSplit(8, 12)
    with pytest.raises(InvalidInputError):
        ChannelSplit(6, 10)


# -- rope -------------------------------------------------------------------

def test_rope_zero_position_identity(rng):
    x = rng.standard_normal(12)
    np.testing.assert_array_equal(rope_rotate(x, (0, 0, 0)), x)


def test_rope_inverse(rng):
    x = rng.standard_normal((5, 12))
    p = rng.uniform(-50, 50, (5, 3))
    np.testing.assert_allclose(rope_rotate(rope_rotate(x, p), -p), x, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.tuples(*[st.integers(-20, 20)] * 3))
def test_rope_relative_positions(seed, shift):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal(12), rng.standard_normal(12)
    pi, pj = rng.integers(0, 30, 3), rng.integers(0, 30, 3)
    a = rope_rotate(q, pi) @ rope_rotate(k, pj)
    b = rope_rotate(q, pi + np.array(shift)) @ rope_rotate(k, pj + np.array(shift))
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_rope_odd_channels():
    with pytest.raises(InvalidInputError):
        rope_rotate(np.ones(5), (1, 2, 3))


# -- UCPE -------------------------------------------------------------------

def scene_tokens(rng, poses, cells=(3, 2)):
    transforms, positions = [], []
    for t, pose in enumerate(poses):
        transforms += latent_ray_transforms(INTR, pose, cells)
        positions += [(t, yy, xx) for yy in range(cells[1]) for xx in range(cells[0])]
    return transforms, np.array(positions, dtype=float)


def test_ucpe_identity(rng):
    split = ChannelSplit(8, 6)
    q, k, v = (rng.standard_normal((4, 14)) for _ in range(3))
    eye = [np.eye(4)] * 4
    for a, b in zip(ucpe_apply(q, k, v, eye, split, np.zeros((4, 3))), (q, k, v)):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ucpe_output(q, eye, split, np.zeros((4, 3))), q)


def test_ucpe_identical_rays_give_raw_product(rng):
    split = ChannelSplit(8, 0)
    pose = random_pose(rng)
    tr = latent_ray_transforms(INTR, pose, (1, 1))[0]
    q, k, v = (rng.standard_normal((2, 8)) for _ in range(3))
    qt, kt, _ = ucpe_apply(q, k, v, [tr, tr], split, np.zeros((2, 0)))
    assert qt[0] @ kt[1] == pytest.approx(q[0] @ k[1], rel=1e-12)


def test_ucpe_rigid_invariance(rng):
    split = ChannelSplit(16, 8)
    for _ in range(20):
        poses = [random_pose(rng) for _ in range(3)]
        g_rot = Rotation.random(random_state=rng).as_matrix()
        g_trans = 10 * rng.standard_normal(3)
        moved = [p.transformed(g_rot, g_trans) for p in poses]
        tr_a, pos = scene_tokens(rng, poses)
        tr_b, _ = scene_tokens(rng, moved)
        n = len(tr_a)
        q, k, v = (rng.standard_normal((n, 24)) for _ in range(3))
        qa, ka, _ = ucpe_apply(q, k, v, tr_a, split, pos)
        qb, kb, _ = ucpe_apply(q, k, v, tr_b, split, pos)
        la = qa[:, :16] @ ka[:, :16].T
        lb = qb[:, :16] @ kb[:, :16].T
        assert np.max(np.abs(la - lb)) <= 1e-9 * np.max(np.abs(la))


def test_ucpe_output_inverts_value_transform(rng):
    split = ChannelSplit(8, 4)
    tr, pos = scene_tokens(rng, [random_pose(rng)], cells=(2, 2))
    q, k, v = (rng.standard_normal((4, 12)) for _ in range(3))
    _, _, vt = ucpe_apply(q, k, v, tr, split, pos)
    np.testing.assert_allclose(ucpe_output(vt, tr, split, pos), v, atol=1e-10)


def test_ucpe_split_mismatch(rng):
    with pytest.raises(InvalidInputError):
        ucpe_apply(np.ones((1, 10)), np.ones((1, 10)), np.ones((1, 10)), [np.eye(4)], ChannelSplit(8, 4), [[0, 0, 0]])
    with pytest.raises(InvalidInputError):
        ucpe_apply(np.ones((2, 12)), np.ones((2, 12)), np.ones((2, 12)), [np.eye(4)], ChannelSplit(8, 4), [[0, 0, 0]])


# -- Plücker ----------------------------------------------------------------

def test_raymap_origin_pose_zero_moments():
    rm = plucker_raymap(INTR, CameraPose(Rotation.from_euler("y", 30, degrees=True).as_matrix(), np.zeros(3)), (16, 12))
    assert rm.shape == (12, 16, 6)
    np.testing.assert_array_equal(rm[..., 3:], 0)


def test_raymap_plucker_constraint(rng):
    rm = plucker_raymap(INTR, random_pose(rng))
    assert rm.shape == (480, 640, 6)
    assert np.max(np.abs(np.einsum("hwc,hwc->hw", rm[..., :3], rm[..., 3:]))) <= 1e-9


def test_raymap_translation_bilinearity(rng):
    pose = random_pose(rng)
    t = rng.standard_normal(3)
    a = plucker_raymap(INTR, pose, (8, 6))
    b = plucker_raymap(INTR, CameraPose(pose.r, pose.o + t), (8, 6))
    np.testing.assert_array_equal(a[..., :3], b[..., :3])
    np.testing.assert_allclose(b[..., 3:] - a[..., 3:], np.cross(t, a[..., :3]), atol=1e-12)


def test_pack_layout_and_roundtrip(rng):
    maps = [plucker_raymap(INTR, random_pose(rng), (4, 3)) for _ in range(8)]
    packed = pack_raymaps(maps)
    assert packed.shape == (3, 4, 48)
    np.testing.assert_array_equal(packed[..., 6 * 5 + 2], maps[5][..., 2])
    for a, b in zip(unpack_raymaps(packed), maps):
        np.testing.assert_array_equal(a, b)
    same = pack_raymaps([maps[0]] * 8)
    for f in range(8):
        np.testing.assert_array_equal(same[..., 6 * f:6 * f + 6], same[..., :6])


def test_pack_static_camera(rng):
    pose = random_pose(rng)
    packed = pack_raymaps([plucker_raymap(INTR, pose, (4, 3)) for _ in range(8)])
    blocks = unpack_raymaps(packed)
    assert all(np.array_equal(b, blocks[0]) for b in blocks)


def test_pack_rejects_bad_input(rng):
    m = plucker_raymap(INTR, random_pose(rng), (4, 3))
    with pytest.raises(InvalidInputError):
        pack_raymaps([m] * 7)
    with pytest.raises(InvalidInputError):
        pack_raymaps([m] * 7 + [m[:2]])


def test_raymap_serialization(tmp_path, rng):
    m = plucker_raymap(INTR, random_pose(rng), (5, 4))
    buf = raymap_to_bytes(m)
    assert buf[:12] == (5).to_bytes(4, "little") + (4).to_bytes(4, "little") + (6).to_bytes(4, "little")
    np.testing.assert_array_equal(raymap_from_bytes(buf), m.astype(np.float32))
    save_raymap(tmp_path / "m.bin", m)
    np.testing.assert_array_equal(load_raymap(tmp_path / "m.bin"), m.astype(np.float32))
    save_raymap(tmp_path / "m.json", m)
    np.testing.assert_array_equal(load_raymap(tmp_path / "m.json"), m)
