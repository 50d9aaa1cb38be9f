import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from msgan.grid import (EdgeConfig, MalformedHeaderError, TrailingDataError, TruncatedPayloadError,
                        UnsupportedDtypeError, UnsupportedNdimError, Volume, decode_volume,
                        downsample2, encode_volume, extract_edges, load_volume, rescale,
                        save_volume, upsample2)


def _header(ndim, shape, spacing, dtype="f32le"):
    return (f"ndim = {ndim}\nshape = {shape}\nspacing = {spacing}\ndtype = {dtype}\ndata:\n").encode()


even_images = st.integers(2, 3).flatmap(lambda nd: hnp.arrays(
    np.float32, st.tuples(*[st.integers(1, 5).map(lambda k: 2 * k)] * nd),
    elements=st.floats(-1, 1, width=32)))
any_images = st.integers(2, 3).flatmap(lambda nd: hnp.arrays(
    np.float32, st.tuples(*[st.integers(1, 6)] * nd), elements=st.floats(-1, 1, width=32)))


# --- Volume ---------------------------------------------------------------

def test_volume_rejects_bad_ndim_and_nonfinite():
    with pytest.raises(ValueError):
        Volume(np.zeros(4))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ValueError):
        Volume(np.array([[0.0, np.nan]]))


def test_volume_is_immutable_copy():
    a = np.zeros((2, 2), np.float32)
    v = Volume(a)
    a[0, 0] = 1
    assert v.data[0, 0] == 0
    with pytest.raises(ValueError):
        v.data[0, 0] = 1
    assert v.spacing == (1.0, 1.0)


# --- NDIMG ----------------------------------------------------------------

def test_roundtrip_ramp(tmp_path):
    v = Volume(np.arange(16, dtype=np.float32).reshape(4, 4) / 16, (0.5, 2.0))
    save_volume(v, tmp_path / "r.ndimg")
    w = load_volume(tmp_path / "r.ndimg")
    assert w == v
    assert w.spacing == (0.5, 2.0)
    assert w.data.tobytes() == v.data.tobytes()


def test_file_layout_is_exact():
    v = Volume(np.array([[1.0, -2.0]], np.float32), (1.0, 0.25))
    blob = encode_volume(v)
    assert blob == (b"ndim = 2\nshape = 1 2\nspacing = 1.0 0.25\ndtype = f32le\ndata:\n"
                    + np.array([1.0, -2.0], "<f4").tobytes())


@given(any_images)
def test_roundtrip_property(x):
    v = Volume(x, tuple(float(i + 1) / 3 for i in range(x.ndim)))
    w = decode_volume(encode_volume(v))
    assert w.shape == v.shape and w.spacing == v.spacing
    assert w.data.tobytes() == v.data.tobytes()


def test_truncated_payload():
    blob = _header(2, "2 2", "1 1") + np.zeros(3, "<f4").tobytes()
    with pytest.raises(TruncatedPayloadError) as e:
        decode_volume(blob)
    assert e.value.field == "data"


def test_trailing_payload():
    blob = _header(2, "1 1", "1 1") + np.zeros(2, "<f4").tobytes()
    with pytest.raises(TrailingDataError):
        decode_volume(blob)


def test_unsupported_ndim():
    blob = _header(4, "1 1 1 1", "1 1 1 1") + np.zeros(1, "<f4").tobytes()
    with pytest.raises(UnsupportedNdimError) as e:
        decode_volume(blob)
    assert e.value.field == "ndim"


def test_unsupported_dtype():
    blob = _header(2, "1 1", "1 1", "f64le") + np.zeros(1, "<f8").tobytes()
    with pytest.raises(UnsupportedDtypeError) as e:
        decode_volume(blob)
    assert e.value.field == "dtype"


@pytest.mark.parametrize("blob, field", [
    (b"ndim = 2\nshape = 1 1\ndtype = f32le\ndata:\n\0\0\0\0", "spacing"),
    (b"ndim = 2\nshape = 1 x\nspacing = 1 1\ndtype = f32le\ndata:\n\0\0\0\0", "shape"),
    (b"ndim = 2\nshape = 1 1 1\nspacing = 1 1\ndtype = f32le\ndata:\n\0\0\0\0", "shape"),
    (b"ndim = 2\nshape = 1 1\nspacing = 1 1\ndtype = f32le\ncolour = red\ndata:\n\0\0\0\0", "colour"),
    (b"ndim = 2\nshape = 1 1\nspacing = 1 1\ndtype = f32le\n\0\0\0\0", "header"),
])
def test_malformed_header_names_field(blob, field):
    with pytest.raises(MalformedHeaderError) as e:
        decode_volume(blob)
    assert e.value.field == field


def test_load_with_source_range(tmp_path):
    save_volume(Volume(np.array([[0.0, 0.5, 1.0]], np.float32)), tmp_path / "x.ndimg")
    v = load_volume(tmp_path / "x.ndimg", source_range=(0.0, 1.0))
    np.testing.assert_array_equal(v.data, [[-1, 0, 1]])
    np.testing.assert_array_equal(rescale(np.array([[-5.0, 5.0]]), 0, 1).data, [[-1, 1]])


# --- resampling ------------------------------------------------------------

def test_downsample_examples():
    np.testing.assert_array_equal(downsample2(np.array([[0, 1], [2, 3]], np.float32)).data, [[1.5]])
    ramp = np.repeat(np.arange(4, dtype=np.float32)[:, None], 4, axis=1)
    # brute-force block averages of the row ramp
    oracle = np.array([[np.mean(ramp[2 * i:2 * i + 2, 2 * j:2 * j + 2]) for j in range(2)] for i in range(2)])
    np.testing.assert_array_equal(downsample2(ramp).data, oracle)
    np.testing.assert_array_equal(oracle, [[0.5, 0.5], [2.5, 2.5]])


def test_downsample_odd_extent():
    with pytest.raises(ValueError):
        downsample2(np.zeros((4, 3)))


@given(even_images)
def test_downsample_properties(x):
    d = downsample2(x)
    assert tuple(2 * n for n in d.shape) == x.shape
    assert abs(float(d.data.astype(np.float64).mean()) - float(x.astype(np.float64).mean())) < 1e-6


@pytest.mark.parametrize("shape", [(3, 5), (2, 2, 2), (1, 7)])
def test_upsample_constant_and_shape(shape):
    u = upsample2(np.full(shape, 0.3, np.float32))
    assert u.shape == tuple(2 * n for n in shape)
    assert np.all(u.data == np.float32(0.3))
    assert np.all(downsample2(u).data == np.float32(0.3))


def _interp_oracle(x):
    # independent route: sample the clamped multilinear interpolant at (j + 0.5) / 2 - 0.5
    coords = np.meshgrid(*[(np.arange(2 * n) + 0.5) / 2 - 0.5 for n in x.shape], indexing="ij")
    return ndimage.map_coordinates(x.astype(np.float64), coords, order=1, mode="nearest")


def test_upsample_1x2_frozen():
    u = upsample2(np.array([[0.0, 2.0]], np.float32)).data
    expected = np.array([[0.0, 0.5, 1.5, 2.0]] * 2)
    np.testing.assert_array_equal(u, expected)
    np.testing.assert_allclose(_interp_oracle(np.array([[0.0, 2.0]])), expected, atol=1e-12)


@given(any_images)
def test_upsample_matches_interpolation_oracle_and_bounds(x):
    u = upsample2(x).data
    np.testing.assert_allclose(u, _interp_oracle(x), atol=1e-6)
    assert u.min() >= x.min() and u.max() <= x.max()


def test_resampling_spacing():
    v = Volume(np.zeros((4, 4)), (1.0, 2.0))
    assert downsample2(v).spacing == (2.0, 4.0)
    assert upsample2(v).spacing == (0.5, 1.0)


# --- edges ------------------------------------------------------------------

def test_constant_image_has_no_edges():
    assert not extract_edges(np.full((8, 8), 0.2)).data.any()


def _sobel_oracle(x):
    p = np.pad(x, 1, mode="symmetric")
    smooth, diff = np.array([1, 2, 1]), np.array([-1, 0, 1])
    gy = np.zeros_like(x)
    gx = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            w = p[i:i + 3, j:j + 3]
            gy[i, j] = np.sum(w * np.outer(diff, smooth))
            gx[i, j] = np.sum(w * np.outer(smooth, diff))
    return np.hypot(gx, gy)


def test_step_image_edges():
    x = np.where(np.arange(8)[None, :] < 4, -1.0, 1.0) * np.ones((8, 1))
    mag = _sobel_oracle(x)
    oracle = (mag >= np.percentile(mag[mag > 0], 90)) & (mag > 0)
    e = extract_edges(x).data
    np.testing.assert_array_equal(e, oracle)
    expected = np.zeros((8, 8))
    expected[:, 3:5] = 1
    np.testing.assert_array_equal(e, expected)


@given(hnp.arrays(np.int64, (9, 11), elements=st.integers(-8, 8)),
       st.integers(-3, 3), st.integers(-16, 16))
def test_edges_binary_and_affine_invariant(k, log_a, b):
    # eighths, power-of-two slopes and dyadic shifts keep every step exact in float64
    x = k / 8.0
    e = extract_edges(x).data
    assert set(np.unique(e)) <= {0.0, 1.0}
    y = 2.0 ** log_a * x + b / 8.0
    np.testing.assert_array_equal(np.argwhere(extract_edges(y).data), np.argwhere(e))


def test_edge_config_bounds():
    for bad in (0, 100, -1, 150):
        with pytest.raises(ValueError):
            EdgeConfig(bad)
    loose = extract_edges(np.random.default_rng(0).random((16, 16)), EdgeConfig(50)).data.sum()
    tight = extract_edges(np.random.default_rng(0).random((16, 16)), EdgeConfig(95)).data.sum()
    assert loose > tight
