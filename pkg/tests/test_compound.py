import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from usvessel.compound import (
    CompoundConfig,
    FrameIndexError,
    TrackedFrame,
    compound,
    fill_holes,
    fit_bounds,
    frames_from_volume,
    normalized_cross_correlation,
    pose_from_rotation,
    read_frame_stream,
    reference_ncc,
    rotational_sweep,
    write_frame_stream,
)
from usvessel.volume import VoxelVolume


def at_z(pixels, z, spacing=(1.0, 1.0)):
    return TrackedFrame(pixels, spacing, pose_from_rotation(np.eye(3), (0.0, 0.0, z)))


def stack(rng, n=100, size=100):
    data = rng.normal(size=(size, size, n)).astype(np.float32)
    return data, [at_z(data[:, :, k], float(k)) for k in range(n)]


# -- frames -------------------------------------------------------------------


def test_pose_must_be_rotation():
    with pytest.raises(ValueError, match="orthonormal"):
        TrackedFrame(np.zeros((2, 2)), (1, 1), np.diag([1.0, 1.0, 1.1, 1.0]))
    with pytest.raises(ValueError, match="determinant"):
        TrackedFrame(np.zeros((2, 2)), (1, 1), np.diag([1.0, 1.0, -1.0, 1.0]))


def test_pose_tolerance():
    rot = Rotation.from_euler("z", 30, degrees=True).as_matrix() + 1e-8
    TrackedFrame(np.zeros((2, 2)), (1, 1), pose_from_rotation(rot))


def test_frame_spacing_positive():
    with pytest.raises(ValueError):
        TrackedFrame(np.zeros((2, 2)), (1, 0), np.eye(4))


# -- bounds -------------------------------------------------------------------


def test_fit_bounds_single_slice():
    origin, dims = fit_bounds([at_z(np.zeros((100, 100)), 0.0)], 1.0)
    assert dims == (100, 100, 1)
    assert origin == (0.0, 0.0, 0.0)


def test_fit_bounds_two_parallel_frames():
    _, dims = fit_bounds([at_z(np.zeros((100, 100)), 0.0), at_z(np.zeros((100, 100)), 9.0)], 1.0)
    assert dims == (100, 100, 10)


def test_fit_bounds_rotation_about_x_swaps_y_and_z():
    rot = Rotation.from_euler("x", 90, degrees=True).as_matrix()
    frame = TrackedFrame(np.zeros((100, 40)), (1.0, 1.0), pose_from_rotation(rot))
    _, dims = fit_bounds([frame], 1.0)
    assert dims == (100, 1, 40)


def test_fit_bounds_empty():
    with pytest.raises(ValueError):
        fit_bounds([], 1.0)


def test_every_pixel_inside_fitted_bounds(rng):
    frames = []
    for _ in range(5):
        rot = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
        frames.append(TrackedFrame(np.zeros((13, 7)), (0.7, 1.3), pose_from_rotation(rot, rng.normal(size=3) * 10)))
    origin, dims = fit_bounds(frames, 0.9)
    for f in frames:
        idx = np.floor((f.pixel_centers() - origin) / 0.9 + 0.5)
        assert (idx >= 0).all() and (idx < np.array(dims)).all()


# -- compounding --------------------------------------------------------------


def test_identity_stack_is_lossless(rng):
    data, frames = stack(rng)
    vol, cov = compound(frames)
    assert vol.dims == (100, 100, 100)
    np.testing.assert_array_equal(vol.data, data)
    assert cov.data.all()


def test_coincident_frames_average():
    vol, cov = compound([at_z(np.full((3, 3), 10.0), 0.0), at_z(np.full((3, 3), 20.0), 0.0)])
    np.testing.assert_array_equal(vol.data, 15.0)


def test_permutation_invariant_bitwise(rng):
    frames = []
    for k in range(12):
        rot = Rotation.from_euler("y", 7 * k, degrees=True).as_matrix()
        frames.append(TrackedFrame(rng.normal(size=(20, 20)), (0.6, 0.6), pose_from_rotation(rot, (0, 0, k * 0.3))))
    vol_a, cov_a = compound(frames)
    order = rng.permutation(len(frames))
    vol_b, cov_b = compound([frames[i] for i in order])
    assert vol_a.equals(vol_b) and cov_a.equals(cov_b)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_output_within_input_range(seed):
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(4):
        rot = Rotation.from_rotvec(rng.normal(size=3) * 0.3).as_matrix()
        frames.append(TrackedFrame(rng.uniform(-5, 5, (9, 9)), (0.8, 0.8), pose_from_rotation(rot, rng.normal(size=3))))
    vol, cov = compound(frames, CompoundConfig(voxel_spacing=0.7))
    lo = min(f.pixels.min() for f in frames)
    hi = max(f.pixels.max() for f in frames)
    covered = cov.data.astype(bool)
    assert vol.data[covered].min() >= lo and vol.data[covered].max() <= hi


def test_explicit_bounds_excluding_everything():
    frames = [at_z(np.ones((4, 4)), 0.0)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        vol, cov = compound(frames, CompoundConfig(bounds=((100.0, 100.0, 100.0), (5, 5, 5))))
    assert caught and "CompoundWarning" in vol.extra
    assert not vol.data.any() and not cov.data.any()


def test_explicit_bounds_subset(rng):
    data, frames = stack(rng, n=10, size=10)
    vol, _ = compound(frames, CompoundConfig(bounds=((2.0, 3.0, 4.0), (4, 4, 4))))
    np.testing.assert_array_equal(vol.data, data[2:6, 3:7, 4:8])


def test_empty_frames():
    with pytest.raises(ValueError):
        compound([])


def test_reconstructs_rotated_sweep_of_smooth_field():
    # a linear field is reproduced exactly by trilinear slicing, so the only
    # error left is the half-voxel binning offset
    x, y, z = np.indices((40, 40, 40), dtype=float)
    ref = VoxelVolume(x + 2 * y - z)
    c = np.full(3, 19.5)
    poses = []
    for deg in range(0, 180, 2):
        rot = Rotation.from_euler("y", deg, degrees=True).as_matrix()
        poses.append(pose_from_rotation(rot, c - rot @ np.array([14.5, 14.5, 0.0])))
    vol, cov = compound(frames_from_volume(ref, poses, (30, 30), (1.0, 1.0)))
    assert cov.data.mean() > 0.3
    world = np.indices(vol.dims).reshape(3, -1).T + np.asarray(vol.origin)
    truth = (world @ np.array([1.0, 2.0, -1.0])).reshape(vol.dims)
    err = np.abs(vol.data - truth)[cov.data.astype(bool)]
    assert err.max() <= 0.5 * np.sqrt(6) + 1e-3  # |grad| * max half-voxel offset


def test_rotational_sweep_geometry():
    ref = VoxelVolume(np.zeros((20, 12, 20)), spacing=(1.0, 1.0, 1.0))
    frames, bounds = rotational_sweep(ref, step_deg=45)
    assert len(frames) == 4
    assert frames[0].pixels.shape == (30, 12)
    assert bounds == ((1.0, 1.0, 1.0), (18, 10, 18))
    centre = np.array([9.5, 5.5, 9.5])
    for f in frames:
        pts = f.pixel_centers()
        # every plane passes through the centre and contains the y axis
        np.testing.assert_allclose(pts.mean(axis=0), centre, atol=1e-9)
        assert np.ptp(pts[:, 1]) == pytest.approx(11.0)
    with pytest.raises(ValueError):
        rotational_sweep(ref, step_deg=0)


def test_smooth_volume_sweep_high_ncc():
    x, y, z = np.indices((32, 32, 32), dtype=float)
    ref = VoxelVolume(np.sin(x / 5) + np.cos(y / 4) * z / 32)
    frames, bounds = rotational_sweep(ref)
    vol, cov = compound(frames, CompoundConfig(bounds=bounds))
    assert reference_ncc(vol, cov, ref) > 0.99


# -- hole filling -------------------------------------------------------------


def _cov(mask):
    return VoxelVolume(mask.astype(np.uint8), kind="label")


def test_fill_no_holes_identity(rng):
    vol = VoxelVolume(rng.normal(size=(4, 4, 4)))
    out = fill_holes(vol, _cov(np.ones((4, 4, 4))), radius=1, passes=3)
    np.testing.assert_array_equal(out.data, vol.data)


def test_fill_single_hole_with_neighbour_mean():
    data = np.full((3, 3, 3), 7.0)
    data[1, 1, 1] = 0
    mask = np.ones((3, 3, 3), bool)
    mask[1, 1, 1] = False
    assert fill_holes(VoxelVolume(data), _cov(mask)).data[1, 1, 1] == 7


def test_fill_checkerboard_one_pass():
    mask = np.indices((6, 6, 6)).sum(axis=0) % 2 == 0
    out = fill_holes(VoxelVolume(mask * 3.0), _cov(mask), radius=1, passes=1)
    assert (out.data != 0).all()


def test_fill_isolated_voxels_stay_zero():
    mask = np.zeros((9, 1, 1), bool)
    mask[0] = True
    out = fill_holes(VoxelVolume(mask * 5.0), _cov(mask), radius=1, passes=2)
    np.testing.assert_array_equal(out.data[:3, 0, 0], 5)
    np.testing.assert_array_equal(out.data[3:, 0, 0], 0)


def test_fill_dims_mismatch():
    with pytest.raises(ValueError):
        fill_holes(VoxelVolume(np.zeros((2, 2, 2))), _cov(np.ones((2, 2, 3))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), radius=st.integers(1, 2), passes=st.integers(1, 4))
def test_fill_preserves_covered_and_is_idempotent(seed, radius, passes):
    rng = np.random.default_rng(seed)
    mask = rng.random((7, 6, 5)) < 0.4
    vol = VoxelVolume(np.where(mask, rng.normal(size=mask.shape), 0.0))
    once = fill_holes(vol, _cov(mask), radius, passes)
    np.testing.assert_array_equal(once.data[mask], vol.data[mask])
    full = fill_holes(vol, _cov(mask), radius, 50)
    if (full.data != 0).all():
        again = fill_holes(full, _cov(np.ones(mask.shape)), radius, 50)
        np.testing.assert_array_equal(again.data, full.data)


# -- frame streams ------------------------------------------------------------


def test_frame_stream_round_trip(tmp_path, rng):
    rot = Rotation.from_euler("xyz", [10, -20, 35], degrees=True).as_matrix()
    frames = [
        TrackedFrame(rng.normal(size=(6, 4)).astype(np.float32), (0.3, 0.45), pose_from_rotation(rot, (1.5, -2, 3)))
        for _ in range(3)
    ]
    write_frame_stream(frames, tmp_path)
    back = read_frame_stream(tmp_path)
    assert len(back) == 3
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_array_equal(a.pose, b.pose)
        assert a.pixel_spacing == b.pixel_spacing


def test_missing_index(tmp_path):
    with pytest.raises(FrameIndexError, match="frame index not found"):
        read_frame_stream(tmp_path)


def test_bad_index_line(tmp_path):
    (tmp_path / "index.txt").write_text("frame.mhd 1 2 3\n")
    with pytest.raises(ValueError, match="19 fields"):
        read_frame_stream(tmp_path)


def test_ncc_basic(rng):
    a = rng.normal(size=100)
    assert normalized_cross_correlation(a, 3 * a + 1) == pytest.approx(1.0)
    assert normalized_cross_correlation(a, -a) == pytest.approx(-1.0)
