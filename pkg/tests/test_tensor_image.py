import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image as PILImage

from paedid.errors import CorruptFileError, FormatError
from paedid.tensor_image import load_image, read_tensor, resize_bilinear, save_image, tensor_to_bytes, write_tensor


def _write_png(path, arr, mode):
    PILImage.fromarray(arr, mode=mode).save(path, format="PNG")


def test_load_black_gray(tmp_path):
    p = tmp_path / "black.png"
    _write_png(p, np.zeros((4, 4), np.uint8), "L")
    img = load_image(p)
    assert img.shape == (4, 4, 1)
    assert np.all(img == 0)


def test_load_white_rgb(tmp_path):
    p = tmp_path / "white.png"
    _write_png(p, np.full((4, 4, 3), 255, np.uint8), "RGB")
    img = load_image(p)
    assert img.shape == (4, 4, 3)
    assert np.all(img == 1)


def test_load_value_128(tmp_path):
    p = tmp_path / "mid.png"
    _write_png(p, np.full((1, 1), 128, np.uint8), "L")
    assert load_image(p)[0, 0, 0] == pytest.approx(128 / 255, abs=1e-7)


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


def test_load_rejects_16_bit(tmp_path):
    p = tmp_path / "deep.png"
    PILImage.fromarray(np.full((4, 4), 1000, np.uint16)).save(p, format="PNG")
    with pytest.raises(FormatError, match="mode|bit depth"):
        load_image(p)


def test_load_rejects_non_png(tmp_path):
    p = tmp_path / "img.bmp"
    PILImage.fromarray(np.zeros((4, 4), np.uint8), mode="L").save(p, format="BMP")
    with pytest.raises(FormatError, match="PNG"):
        load_image(p)


def test_load_rejects_palette(tmp_path):
    p = tmp_path / "pal.png"
    PILImage.fromarray(np.zeros((4, 4), np.uint8), mode="L").convert("P").save(p, format="PNG")
    with pytest.raises(FormatError, match="mode"):
        load_image(p)


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_png_round_trip_extremes(tmp_path, value):
    img = np.full((8, 8, 1), value, np.float32)
    save_image(img, tmp_path / "x.png")
    assert np.array_equal(load_image(tmp_path / "x.png"), img)


@pytest.mark.parametrize("channels", [1, 3])
def test_png_round_trip_quantization_bound(tmp_path, rng, channels):
    img = rng.random((16, 12, channels)).astype(np.float32)
    save_image(img, tmp_path / "r.png")
    back = load_image(tmp_path / "r.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 510 + 1e-7


def test_resize_constant_any_size():
    img = np.full((9, 7, 1), 0.5, np.float32)
    for h, w in [(1, 1), (3, 20), (18, 14), (9, 7)]:
        out = resize_bilinear(img, h, w)
        assert out.shape == (h, w, 1)
        assert np.all(out == np.float32(0.5))


def test_resize_identity_exact(rng):
    img = rng.random((10, 13, 3)).astype(np.float32)
    assert np.array_equal(resize_bilinear(img, 10, 13), img)


def test_resize_checker_to_one_pixel():
    img = np.array([[0.0, 1.0], [1.0, 0.0]], np.float32)
    assert resize_bilinear(img, 1, 1)[0, 0, 0] == pytest.approx(0.5, abs=1e-7)


def _bilinear_oracle(img, oh, ow):
    """Per-pixel half-pixel-centred bilinear sampling with edge clamping."""
    h, w, c = img.shape
    out = np.zeros((oh, ow, c))
    for y in range(oh):
        sy = min(max((y + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(ow):
            sx = min(max((x + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[y, x] = top * (1 - fy) + bot * fy
    return out


@pytest.mark.parametrize("oh,ow", [(5, 9), (16, 4), (3, 3)])
def test_resize_matches_oracle(rng, oh, ow):
    img = rng.random((7, 6, 1))
    out = resize_bilinear(img, oh, ow)
    assert np.allclose(out, _bilinear_oracle(img, oh, ow), atol=1e-6)


@given(
    arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3])), elements=st.floats(0, 1, width=32)),
    st.integers(1, 20),
    st.integers(1, 20),
)
def test_resize_properties(img, oh, ow):
    out = resize_bilinear(img, oh, ow)
    assert out.shape == (oh, ow, img.shape[2])
    assert np.all((out >= 0) & (out <= 1))
    assert np.array_equal(resize_bilinear(img, img.shape[0], img.shape[1]), img)


def test_ptf_single_element(tmp_path):
    write_tensor(np.array([0.0], np.float32), tmp_path / "t.ptf")
    t = read_tensor(tmp_path / "t.ptf")
    assert t.shape == (1,) and t[0] == 0.0


def test_ptf_row_major_layout(tmp_path):
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(t, tmp_path / "t.ptf")
    raw = (tmp_path / "t.ptf").read_bytes()
    assert raw[:4] == b"PAET"
    assert struct.unpack("<4I", raw[4:20]) == (1, 2, 2, 3)
    assert np.array_equal(np.frombuffer(raw[20:], "<f4"), np.arange(6))
    assert np.array_equal(read_tensor(tmp_path / "t.ptf"), t)


def test_ptf_truncated(tmp_path):
    p = tmp_path / "t.ptf"
    write_tensor(np.ones((3, 3), np.float32), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(CorruptFileError):
        read_tensor(p)


def test_ptf_bad_magic_and_trailing(tmp_path):
    p = tmp_path / "t.ptf"
    good = tensor_to_bytes(np.ones(4, np.float32))
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(CorruptFileError, match="magic"):
        read_tensor(p)
    p.write_bytes(good + b"\0")
    with pytest.raises(CorruptFileError, match="trailing"):
        read_tensor(p)


def test_ptf_rejects_non_finite():
    with pytest.raises(ValueError):
        tensor_to_bytes(np.array([np.nan], np.float32))


@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple), elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_ptf_round_trip_bit_identical(tmp_path_factory, t):
    p = tmp_path_factory.mktemp("ptf") / "t.ptf"
    write_tensor(t, p)
    back = read_tensor(p)
    assert back.shape == t.shape
    assert back.tobytes() == np.ascontiguousarray(t, "<f4").tobytes()
