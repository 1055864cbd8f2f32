import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mms.errors import GeometryError
from mms.imageio import decode_pnm, encode_pnm, read_pnm, write_pnm
from mms.patches import (ImageBuf, denormalize_targets, depatchify, normalize_targets, patch_stats,
                         patchify, prepare_image, resize_bilinear)

unit = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(8, 8, 1), (8, 16, 3), (32, 128, 3)]), st.data())
def test_patchify_roundtrip_bitwise(shape, data):
    x = data.draw(arrays(np.float64, shape, elements=unit))
    img = ImageBuf(x)
    assert np.array_equal(depatchify(patchify(img)).data, img.data)


def test_patch_layout_row_col_channel():
    x = np.arange(32 * 128 * 3, dtype=np.float64).reshape(32, 128, 3) / (32 * 128 * 3)
    grid = patchify(ImageBuf(x))
    assert (grid.grid_h, grid.grid_w, grid.num_patches, grid.patch_dim) == (8, 32, 256, 48)
    # patch k = grid cell (k // 32, k % 32); inside, (row, col, channel) order
    k = 3 * 32 + 5
    assert np.array_equal(grid.patches.data[k], x[12:16, 20:24, :].reshape(-1))
    assert grid.patches.data[k][:3].tolist() == x[12, 20].tolist()
    assert grid.patches.data[k][3:6].tolist() == x[12, 21].tolist()


def test_patchify_rejects_indivisible():
    with pytest.raises(GeometryError):
        patchify(ImageBuf(np.zeros((30, 128, 3))))


def test_imagebuf_validation():
    assert ImageBuf(np.zeros((4, 4))).channels == 1
    with pytest.raises(ValueError):
        ImageBuf(np.full((2, 2, 3), 1.5))
    with pytest.raises(GeometryError):
        ImageBuf(np.zeros((2, 2, 2)))


def test_normalized_targets_stats(rng):
    grid = patchify(ImageBuf(rng.random((32, 128, 3))))
    t = normalize_targets(grid)
    assert np.allclose(t.patches.data.mean(axis=1), 0.0, atol=1e-12)
    var = grid.patches.data.var(axis=1)
    assert np.allclose(t.patches.data.var(axis=1), var / (var + 1e-6), atol=1e-12)
    back = denormalize_targets(t)
    assert np.allclose(back.patches.data, grid.patches.data, atol=1e-14)


def test_constant_patch_normalises_to_zero():
    grid = patchify(ImageBuf(np.full((32, 128, 3), 0.3)))
    t = normalize_targets(grid)
    assert np.array_equal(t.patches.data, np.zeros((256, 48)))
    mean, std = patch_stats(grid.patches.data)
    assert np.allclose(std, 1e-3)


def test_normalize_eps_must_be_positive(rng):
    with pytest.raises(ValueError):
        normalize_targets(patchify(ImageBuf(rng.random((8, 8, 3)))), eps=0.0)


def test_bilinear_hand_oracle_upsample():
    # half-pixel centres: output x=j samples (j + .5)/2 - .5 -> -.25, .25, .75, 1.25 (clamped)
    img = ImageBuf(np.array([[0.0, 1.0]]))
    out = resize_bilinear(img, 1, 4).data[0, :, 0]
    assert np.allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_bilinear_hand_oracle_downsample():
    img = ImageBuf(np.array([[0.0, 0.2, 0.4, 1.0], [1.0, 1.0, 1.0, 1.0]]))
    out = resize_bilinear(img, 1, 2).data[0, :, 0]
    # y samples row 0.5 -> halfway between rows; x samples 0.5 and 2.5
    assert np.allclose(out, [(0.1 + 1.0) / 2, (0.7 + 1.0) / 2], atol=1e-15)


def test_bilinear_identity_and_constant(rng):
    x = rng.random((10, 7, 3))
    assert np.array_equal(resize_bilinear(ImageBuf(x), 10, 7).data, x)
    c = resize_bilinear(ImageBuf(np.full((13, 50, 3), 0.4)), 32, 128).data
    assert np.allclose(c, 0.4, atol=1e-15)


def test_prepare_image_grey_to_rgb():
    out = prepare_image(ImageBuf(np.full((16, 64), 0.5)))
    assert out.data.shape == (32, 128, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.data())
def test_pnm_roundtrip_on_8bit_values(h, w, c, data):
    q = data.draw(arrays(np.uint8, (h, w, c)))
    img = ImageBuf(q.astype(np.float64) / 255.0)
    back = decode_pnm(encode_pnm(img))
    assert np.array_equal(back.data, img.data)


def test_pnm_quantisation_and_header(tmp_path):
    img = ImageBuf(np.array([[[0.0, 0.5, 1.0]]]))
    buf = encode_pnm(img)
    assert buf.startswith(b"P6\n1 1\n255\n")
    assert buf[-3:] == bytes([0, 128, 255])
    p = tmp_path / "x.pgm"
    write_pnm(p, ImageBuf(np.zeros((2, 3))))
    assert read_pnm(p).data.shape == (2, 3, 1)


def test_pnm_header_comments():
    buf = b"P5\n# comment\n2 1\n255\n" + bytes([0, 255])
    assert decode_pnm(buf).data[0, :, 0].tolist() == [0.0, 1.0]


def test_read_pnm_names_file(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(OSError, match="bad.ppm"):
        read_pnm(p)
    with pytest.raises(OSError, match="missing.ppm"):
        read_pnm(tmp_path / "missing.ppm")
