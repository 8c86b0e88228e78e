import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from vggtocc.formats import (
    FormatError, colormap, decode_ppm, decode_vocp, decode_vogd, encode_ppm, encode_vocp, encode_vogd,
    load_vocp, load_vogd, save_vocp, save_vogd,
)

shapes = hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)


@given(hnp.arrays(np.float32, shapes, elements=st.floats(width=32, allow_nan=False)))
def test_vogd_f32_roundtrip(arr):
    out = decode_vogd(io.BytesIO(encode_vogd(arr)))
    assert out.dtype == np.float32 and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


@given(hnp.arrays(np.uint8, shapes))
def test_vogd_u8_roundtrip(arr):
    out = decode_vogd(io.BytesIO(encode_vogd(arr)))
    assert out.dtype == np.uint8 and np.array_equal(out, arr)


def test_vogd_layout_and_files(tmp_path):
    arr = np.arange(6, dtype=np.uint8).reshape(2, 3)
    blob = encode_vogd(arr)
    assert blob[:4] == b"VOGD"
    assert blob[4:8] == b"\x01\x00\x01\x02"
    assert blob[8:16] == b"\x02\x00\x00\x00\x03\x00\x00\x00"
    assert blob[16:] == bytes(range(6))
    save_vogd(tmp_path / "a.vogd", arr)
    assert (tmp_path / "a.vogd").read_bytes() == blob
    assert np.array_equal(load_vogd(tmp_path / "a.vogd"), arr)


def test_vogd_errors():
    good = encode_vogd(np.zeros((2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_vogd(io.BytesIO(b"XOGD" + good[4:]))
    with pytest.raises(FormatError):
        decode_vogd(io.BytesIO(good[:-1]))
    with pytest.raises(FormatError):
        decode_vogd(io.BytesIO(good[:6] + b"\x07" + good[7:]))
    with pytest.raises(FormatError):
        decode_vogd(io.BytesIO(good[:4] + b"\x09\x00" + good[6:]))
    with pytest.raises(FormatError):
        encode_vogd(np.zeros(3, np.int64))


names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)


@given(st.dictionaries(names, hnp.arrays(np.float32, shapes, elements=st.floats(width=32, allow_nan=False)),
                       max_size=4))
def test_vocp_roundtrip(tensors):
    out = decode_vocp(io.BytesIO(encode_vocp(tensors)))
    assert sorted(out) == sorted(tensors)
    for k, v in tensors.items():
        assert out[k].shape == v.shape and out[k].tobytes() == v.tobytes()


def test_vocp_bitexact_file(tmp_path):
    t = {"b": np.ones((2,), np.float32), "a.w": np.arange(6, dtype=np.float32).reshape(3, 2)}
    save_vocp(tmp_path / "c.vocp", t)
    first = (tmp_path / "c.vocp").read_bytes()
    save_vocp(tmp_path / "c.vocp", load_vocp(tmp_path / "c.vocp"))
    assert (tmp_path / "c.vocp").read_bytes() == first
    assert first.index(b"a.w") < first.index(b"\x01\x00b")


def test_vocp_errors():
    good = encode_vocp({"x": np.zeros(3, np.float32)})
    with pytest.raises(FormatError):
        decode_vocp(io.BytesIO(b"VOGD" + good[4:]))
    with pytest.raises(FormatError):
        decode_vocp(io.BytesIO(good + b"\x00"))
    with pytest.raises(FormatError):
        decode_vocp(io.BytesIO(good[:-2]))


def test_colormap_anchors():
    rgb = colormap(np.array([0.0, 0.5, 1.0, -3.0, 7.0]))
    assert rgb.tolist() == [[59, 76, 192], [221, 221, 221], [180, 4, 38], [59, 76, 192], [180, 4, 38]]


def test_ppm_roundtrip():
    rgb = colormap(np.linspace(0, 1, 12).reshape(3, 4))
    blob = encode_ppm(rgb)
    assert blob.startswith(b"P6\n4 3\n255\n")
    assert np.array_equal(decode_ppm(blob), rgb)
    with pytest.raises(FormatError):
        decode_ppm(b"P3\n1 1\n255\n000")
