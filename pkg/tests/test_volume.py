import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from usvessel.volume import (
    DegenerateVolumeError,
    VolumeError,
    VoxelVolume,
    crop,
    mean_normalize,
    median_filter3,
    pad,
    preprocess,
    read_image2d,
    read_volume,
    resample,
    resampled_dims,
    round_half_up,
    write_image2d,
    write_volume,
)

small_dims = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


def _vol(rng, dims=(4, 4, 4), **kw):
    return VoxelVolume(rng.normal(size=dims).astype(np.float32), **kw)


# -- the type -----------------------------------------------------------------


def test_label_must_be_binary():
    with pytest.raises(VolumeError):
        VoxelVolume(np.full((2, 2, 2), 2), kind="label")


@pytest.mark.parametrize("spacing", [(1, 0, 1), (1, -1, 1), (1, np.inf, 1)])
def test_spacing_positive_finite(spacing):
    with pytest.raises(VolumeError):
        VoxelVolume(np.zeros((2, 2, 2)), spacing=spacing)


def test_intensity_rejects_nan():
    with pytest.raises(VolumeError):
        VoxelVolume(np.array([[[np.nan]]]))


# -- I/O ----------------------------------------------------------------------


@pytest.mark.parametrize("suffix", [".mhd", ".mha"])
def test_round_trip_bit_identical(tmp_path, rng, suffix):
    vol = _vol(rng, (4, 4, 4), spacing=(0.5, 0.75, 2.0), origin=(1.0, -2.0, 3.5))
    write_volume(vol, tmp_path / f"v{suffix}")
    back = read_volume(tmp_path / f"v{suffix}")
    assert back.equals(vol)


def test_x_fastest_little_endian(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_volume(VoxelVolume(data), tmp_path / "v.mhd")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw[:3], [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]])
    header = (tmp_path / "v.mhd").read_text()
    assert "DimSize = 2 3 4" in header
    assert "ElementType = MET_FLOAT" in header


def test_label_round_trip_uchar(tmp_path, rng):
    lab = VoxelVolume((rng.random((5, 3, 2)) > 0.5).astype(np.uint8), kind="label")
    write_volume(lab, tmp_path / "l.mhd")
    assert "MET_UCHAR" in (tmp_path / "l.mhd").read_text()
    back = read_volume(tmp_path / "l.mhd")
    assert back.kind == "label" and back.equals(lab)


def test_short_raw_size_mismatch(tmp_path):
    (tmp_path / "big.raw").write_bytes(b"\0" * 1000)
    (tmp_path / "big.mhd").write_text(
        "ObjectType = Image\nNDims = 3\nDimSize = 512 400 256\nElementSpacing = 1 1 1\n"
        "ElementType = MET_FLOAT\nElementDataFile = big.raw\n"
    )
    with pytest.raises(VolumeError, match="size"):
        read_volume(tmp_path / "big.mhd")


def test_label_value_two_rejected_on_load(tmp_path):
    codes = np.zeros((2, 2, 2), np.uint8)
    codes[0, 0, 0] = 2
    write_volume(VoxelVolume(codes, kind="labelmap"), tmp_path / "m.mhd")
    with pytest.raises(VolumeError):
        read_volume(tmp_path / "m.mhd", kind="label")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "absent.mhd")


def test_non_positive_spacing_in_header(tmp_path):
    (tmp_path / "v.raw").write_bytes(np.zeros(8, "<f4").tobytes())
    (tmp_path / "v.mhd").write_text(
        "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 0 1\n"
        "ElementType = MET_FLOAT\nElementDataFile = v.raw\n"
    )
    with pytest.raises(VolumeError):
        read_volume(tmp_path / "v.mhd")


def test_malformed_header(tmp_path):
    (tmp_path / "v.mhd").write_text("this is not a header\n")
    with pytest.raises(VolumeError):
        read_volume(tmp_path / "v.mhd")


def test_nan_rejected_before_write(tmp_path):
    vol = VoxelVolume(np.zeros((2, 2, 2)))
    vol.data[0, 0, 0] = np.nan
    with pytest.raises(VolumeError):
        write_volume(vol, tmp_path / "v.mhd")
    assert not (tmp_path / "v.mhd").exists()


def test_downsampled_header_matches_data_length(tmp_path):
    dims = resampled_dims((512, 400, 256), 0.4)
    write_volume(VoxelVolume(np.zeros(dims, np.uint8), kind="label"), tmp_path / "d.mhd")
    assert f"DimSize = {dims[0]} {dims[1]} {dims[2]}" in (tmp_path / "d.mhd").read_text()
    assert (tmp_path / "d.raw").stat().st_size == 205 * 160 * 102


def test_unknown_header_keys_preserved(tmp_path):
    vol = VoxelVolume(np.ones((2, 2, 2)), extra={"Modality": "MET_MOD_US", "AnatomicalOrientation": "RAI"})
    write_volume(vol, tmp_path / "v.mhd")
    first = read_volume(tmp_path / "v.mhd")
    assert first.extra == vol.extra
    write_volume(first, tmp_path / "w.mhd")
    assert (tmp_path / "w.mhd").read_text().replace("w.raw", "v.raw") == (tmp_path / "v.mhd").read_text()


def test_image2d_round_trip(tmp_path, rng):
    px = rng.normal(size=(7, 5)).astype(np.float32)
    write_image2d(px, tmp_path / "f.mhd", (0.3, 0.4))
    back, spacing, _ = read_image2d(tmp_path / "f.mhd")
    np.testing.assert_array_equal(back, px)
    assert spacing == (0.3, 0.4)


@settings(max_examples=30, deadline=None)
@given(data=arrays(np.float32, small_dims, elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "v.mha"
    vol = VoxelVolume(data, spacing=(0.7, 1.1, 3.0))
    write_volume(vol, path)
    assert read_volume(path).equals(vol)


# -- resampling ---------------------------------------------------------------


def test_round_half_up():
    assert [round_half_up(x) for x in (204.8, 160.0, 102.4, 0.5, 1.5, 2.5)] == [205, 160, 102, 1, 2, 3]


def test_resampled_dims_published_sizes():
    assert resampled_dims((512, 400, 256), 0.4) == (205, 160, 102)


def test_resample_factor_one_identity(rng):
    vol = _vol(rng, (5, 6, 7))
    assert resample(vol, 1.0).equals(vol)


def test_resample_constant(rng):
    vol = VoxelVolume(np.full((20, 13, 9), 3.25))
    out = resample(vol, 0.4)
    assert out.dims == (8, 5, 4)
    np.testing.assert_array_equal(out.data, np.float32(3.25))


def test_resample_spacing_and_extent():
    vol = VoxelVolume(np.zeros((10, 20, 5)), spacing=(1.0, 0.5, 2.0), origin=(0, 0, 0))
    out = resample(vol, 0.4)
    assert out.dims == (4, 8, 2)
    np.testing.assert_allclose(out.spacing, (2.5, 1.25, 5.0))
    # physical extent of the voxel grid is unchanged
    for d0, s0, o0, d1, s1, o1 in zip(vol.dims, vol.spacing, vol.origin, out.dims, out.spacing, out.origin):
        assert o1 - s1 / 2 == pytest.approx(o0 - s0 / 2)
        assert o1 + (d1 - 0.5) * s1 == pytest.approx(o0 + (d0 - 0.5) * s0)


def test_resample_label_stays_binary(rng):
    lab = VoxelVolume((rng.random((17, 11, 9)) > 0.7).astype(np.uint8), kind="label")
    out = resample(lab, 0.4)
    assert out.kind == "label" and set(np.unique(out.data)) <= {0, 1}


def test_resample_bad_factor(rng):
    for f in (0.0, -0.1, 1.5):
        with pytest.raises(VolumeError):
            resample(_vol(rng), f)


@settings(max_examples=30, deadline=None)
@given(
    data=arrays(np.float32, st.tuples(st.integers(2, 9), st.integers(2, 9), st.integers(2, 9)),
                elements=st.floats(-100, 100, width=32)),
    factor=st.floats(0.1, 1.0),
)
def test_resample_preserves_range(data, factor):
    out = resample(VoxelVolume(data), factor).data
    assert out.min() >= data.min() and out.max() <= data.max()


# -- median -------------------------------------------------------------------


def test_median_constant():
    vol = VoxelVolume(np.full((4, 5, 6), 2.0))
    assert median_filter3(vol).equals(vol)


def test_median_removes_impulse():
    data = np.zeros((5, 5, 5))
    data[2, 2, 2] = 100
    assert median_filter3(VoxelVolume(data)).data[2, 2, 2] == 0


def test_median_center_of_1_to_27():
    data = np.random.default_rng(3).permutation(np.arange(1, 28)).reshape(3, 3, 3).astype(float)
    assert median_filter3(VoxelVolume(data)).data[1, 1, 1] == np.sort(data.ravel())[13] == 14


def test_median_edge_replication():
    # with edge replication the corner sees its own value 8 times among 27
    data = np.zeros((3, 3, 3))
    data[0, 0, 0] = 1
    data[1, 0, 0] = data[0, 1, 0] = data[0, 0, 1] = 1
    data[1, 1, 0] = data[1, 0, 1] = data[0, 1, 1] = 1
    assert median_filter3(VoxelVolume(data)).data[0, 0, 0] == 1


def test_median_rejects_labels():
    with pytest.raises(VolumeError):
        median_filter3(VoxelVolume(np.zeros((3, 3, 3)), kind="label"))


@settings(max_examples=30, deadline=None)
@given(data=arrays(np.float32, small_dims, elements=st.floats(-50, 50, width=32)))
def test_median_within_range(data):
    out = median_filter3(VoxelVolume(data)).data
    assert out.min() >= data.min() and out.max() <= data.max()


# -- normalization ------------------------------------------------------------


def test_normalize_two_point():
    data = np.zeros((2, 2, 2))
    data[0] = 2
    out = mean_normalize(VoxelVolume(data)).data
    assert set(np.unique(out)) == {-1.0, 1.0}


def test_normalize_idempotent(rng):
    once = mean_normalize(_vol(rng, (6, 5, 4)))
    np.testing.assert_allclose(mean_normalize(once).data, once.data, atol=1e-6)


def test_normalize_constant_degenerate():
    with pytest.raises(DegenerateVolumeError):
        mean_normalize(VoxelVolume(np.full((3, 3, 3), 4.0)))


def test_normalize_mean_only_flag(rng):
    out = mean_normalize(_vol(rng, (5, 5, 5)), scale=False).data.astype(np.float64)
    assert abs(out.mean()) < 1e-6
    assert abs(out.std() - 1) > 1e-3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.integers(-6, 6), b=st.integers(-100, 100))
def test_normalize_affine_equivariant(seed, k, b):
    # dyadic scale, integer shift and a 1/8 grid keep a*v + b exact in float32
    base = np.random.default_rng(seed).integers(-800, 800, size=(5, 4, 3)) / 8.0
    if np.ptp(base) == 0:
        return
    a = 2.0**k
    one = mean_normalize(VoxelVolume(base)).data
    two = mean_normalize(VoxelVolume(a * base + b)).data
    np.testing.assert_allclose(two, one, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), dims=st.tuples(st.integers(2, 30), st.integers(2, 30), st.integers(2, 30)))
def test_normalize_moments(seed, dims):
    out = mean_normalize(VoxelVolume(np.random.default_rng(seed).gamma(2.0, 3.0, size=dims))).data
    out = out.astype(np.float64)
    assert abs(out.mean()) < 1e-6
    assert abs(out.std() - 1) < 1e-6


# -- padding ------------------------------------------------------------------


def test_pad_zero_identity(rng):
    vol = _vol(rng)
    assert pad(vol, 0).equals(vol)


def test_pad_published_dims():
    lab = VoxelVolume(np.ones((205, 160, 102), np.uint8), kind="label")
    out = pad(lab, 32)
    assert out.dims == (269, 224, 166)
    assert set(np.unique(out.data)) == {0, 1}
    assert out.data.sum() == 205 * 160 * 102


def test_pad_origin_and_centering(rng):
    vol = _vol(rng, (3, 4, 5), spacing=(0.5, 1.0, 2.0), origin=(10.0, 20.0, 30.0))
    out = pad(vol, 2)
    assert out.origin == (9.0, 18.0, 26.0)
    np.testing.assert_array_equal(out.data[2:-2, 2:-2, 2:-2], vol.data)
    assert out.data.sum() == pytest.approx(vol.data.sum(), rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(data=arrays(np.float32, small_dims, elements=st.floats(-10, 10, width=32)), margin=st.integers(0, 4))
def test_pad_crop_round_trip(data, margin):
    vol = VoxelVolume(data, spacing=(0.5, 1.5, 2.0), origin=(1.0, 2.0, 3.0))
    assert crop(pad(vol, margin), margin).equals(vol)


def test_crop_too_large(rng):
    with pytest.raises(VolumeError):
        crop(_vol(rng, (4, 4, 4)), 2)


# -- preprocess chain ---------------------------------------------------------


def test_preprocess_order_and_dims(rng):
    vol = VoxelVolume(rng.gamma(2.0, size=(30, 25, 20)))
    out = preprocess(vol, factor=0.4, margin=3)
    assert out.dims == (18, 16, 14)
    inner = crop(out, 3).data.astype(np.float64)
    assert abs(inner.mean()) < 1e-6 and abs(inner.std() - 1) < 1e-6
    expected = mean_normalize(median_filter3(resample(vol, 0.4)))
    np.testing.assert_array_equal(inner, expected.data)


def test_preprocess_label_skips_filters(rng):
    lab = VoxelVolume((rng.random((20, 10, 10)) > 0.5).astype(np.uint8), kind="label")
    out = preprocess(lab, factor=0.5, margin=2)
    assert out.kind == "label"
    assert crop(out, 2).equals(resample(lab, 0.5))


def test_preprocess_identity_settings(rng):
    vol = _vol(rng, (6, 6, 6))
    assert preprocess(vol, factor=1.0, median=False, normalize=False, margin=0).equals(vol)
