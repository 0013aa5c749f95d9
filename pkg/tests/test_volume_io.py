import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emeralds.errors import (
    InvalidWindow,
    MalformedLine,
    MissingKey,
    OutOfBounds,
    PayloadSizeMismatch,
    UnsupportedElementType,
)
from emeralds.volume_io import (
    LOCAL,
    MhdHeader,
    ValueDomain,
    Volume3D,
    emit_mhd_header,
    extract_patch,
    load_volume,
    normalize_volume,
    parse_mhd_header,
    read_mhd,
    round_half_away,
    voxel_to_world,
    world_to_voxel,
    write_mhd,
)

EXAMPLE = ("NDims = 3\nDimSize = 512 512 120\nElementType = MET_SHORT\n"
           "ElementSpacing = 0.7 0.7 2.5\nOffset = -170 -170 -300\nElementDataFile = scan.raw")


def header(dims=(4, 4, 4), etype="MET_UCHAR", spacing=(1.0, 1.0, 1.0),
           offset=(0.0, 0.0, 0.0), msb=False):
    return MhdHeader(len(dims), tuple(dims), etype, tuple(spacing), tuple(offset),
                     "x.raw", msb)


def test_parse_example_header():
    h = parse_mhd_header(EXAMPLE)
    expected = MhdHeader(3, (512, 512, 120), "MET_SHORT", (0.7, 0.7, 2.5),
                         (-170.0, -170.0, -300.0), "scan.raw", False, {})
    assert h == expected


@pytest.mark.parametrize("key", ["DimSize", "ElementType", "ElementDataFile"])
def test_missing_required_key(key):
    text = "\n".join(l for l in EXAMPLE.splitlines() if not l.startswith(key))
    with pytest.raises(MissingKey) as exc:
        parse_mhd_header(text)
    assert exc.value.key == key


def test_malformed_and_unsupported():
    with pytest.raises(MalformedLine) as exc:
        parse_mhd_header("NDims = 3\nthis line has no equals\n" + EXAMPLE)
    assert exc.value.line_no == 2
    with pytest.raises(MalformedLine):
        parse_mhd_header(EXAMPLE.replace("512 512 120", "512 x 120"))
    with pytest.raises(UnsupportedElementType):
        parse_mhd_header(EXAMPLE.replace("MET_SHORT", "MET_DOUBLE"))


def test_parse_aliases_and_extra_keys():
    text = ("ObjectType = Image\nNDims = 3\nBinaryDataByteOrderMSB = True\n"
            "Position = 1 2 3\nAnatomicalOrientation = RAI\nDimSize = 2 2 2\n"
            "ElementType = MET_FLOAT\nElementDataFile = LOCAL\n")
    h = parse_mhd_header(text)
    assert h.offset == (1.0, 2.0, 3.0)
    assert h.byte_order_msb is True
    assert h.extra == {"AnatomicalOrientation": "RAI"}
    assert h.element_spacing == (1.0, 1.0, 1.0)


def test_uchar_round_trip_and_load():
    h = header()
    assert parse_mhd_header(emit_mhd_header(h)) == h
    v = load_volume(h, bytes(range(64)))
    assert v.voxels.tolist() == list(range(64))
    assert v.value_domain is ValueDomain.NORMALIZED_U8


def test_emit_msb_and_2d():
    assert "ElementByteOrderMSB = True" in emit_mhd_header(header(msb=True))
    h2 = MhdHeader(2, (8, 8), "MET_SHORT", (0.5, 0.5), (0.0, 0.0), "s.raw")
    text = emit_mhd_header(h2)
    assert "NDims = 2" in text
    assert parse_mhd_header(text) == h2


_key_chars = string.ascii_letters + string.digits + "_"
_reserved = {"ObjectType", "NDims", "BinaryData", "DimSize", "ElementType", "ElementSpacing",
             "ElementSize", "ElementDataFile", "CompressedData", "Offset", "Origin",
             "Position", "ElementByteOrderMSB", "BinaryDataByteOrderMSB"}


@st.composite
def headers(draw):
    nd = draw(st.sampled_from([2, 3]))
    finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6)
    positive = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)
    extra = draw(st.dictionaries(
        st.text(_key_chars, min_size=1, max_size=12).filter(lambda k: k not in _reserved),
        st.text(string.ascii_letters + string.digits + " .-=", min_size=1, max_size=20)
        .map(str.strip).filter(bool),
        max_size=3))
    return MhdHeader(
        ndims=nd,
        dim_size=tuple(draw(st.lists(st.integers(1, 4096), min_size=nd, max_size=nd))),
        element_type=draw(st.sampled_from(["MET_SHORT", "MET_UCHAR", "MET_FLOAT"])),
        element_spacing=tuple(draw(st.lists(positive, min_size=nd, max_size=nd))),
        offset=tuple(draw(st.lists(finite, min_size=nd, max_size=nd))),
        element_data_file=draw(st.sampled_from([LOCAL, "scan.raw", "a b.raw"])),
        byte_order_msb=draw(st.booleans()),
        extra=extra,
    )


@settings(max_examples=200, deadline=None)
@given(headers())
def test_header_round_trip_property(h):
    assert parse_mhd_header(emit_mhd_header(h)) == h


def test_load_short_little_endian():
    h = header(dims=(2, 1, 1), etype="MET_SHORT")
    v = load_volume(h, bytes([0x00, 0x04, 0x00, 0x00]))
    assert v.voxels.tolist() == [1024, 0]
    assert v.value_domain is ValueDomain.HOUNSFIELD


def test_load_short_big_endian():
    h = header(dims=(2, 1, 1), etype="MET_SHORT", msb=True)
    assert load_volume(h, bytes([0x04, 0x00, 0xFF, 0xFE])).voxels.tolist() == [1024, -2]


def test_load_float():
    h = header(dims=(2, 1, 1), etype="MET_FLOAT")
    payload = np.array([1.5, -2.25], dtype="<f4").tobytes()
    assert load_volume(h, payload).voxels.tolist() == [1.5, -2.25]


def test_payload_size_checks():
    with pytest.raises(PayloadSizeMismatch) as exc:
        load_volume(header(dims=(1, 1, 1)), b"")
    assert (exc.value.expected, exc.value.actual) == (1, 0)
    assert load_volume(header(dims=(1, 1, 1)), bytes([0x7F])).voxels.tolist() == [127]


def test_flat_index_layout():
    h = header(dims=(2, 3, 4), etype="MET_SHORT")
    payload = np.arange(24, dtype="<i2").tobytes()
    v = load_volume(h, payload)
    assert v.voxels.size == 24
    for z in range(4):
        for y in range(3):
            for x in range(2):
                assert v[(x, y, z)] == x + 2 * (y + 3 * z)


def test_volume_is_read_only():
    v = load_volume(header(dims=(1, 1, 1)), bytes([1]))
    with pytest.raises(ValueError):
        v.voxels[0] = 3


def test_round_half_away():
    assert round_half_away([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49]).tolist() == \
        [-3, -2, -1, 1, 2, 3, 0]


def hu_volume(values):
    values = np.asarray(values, dtype=np.int16)
    h = header(dims=(values.size, 1, 1), etype="MET_SHORT")
    return Volume3D(h, values, ValueDomain.HOUNSFIELD)


def test_normalize_examples():
    out = normalize_volume(hu_volume([-1000, 400, -300, -2000, 3000]), (-1000, 400))
    assert out.voxels.tolist() == [0, 255, 128, 0, 255]
    assert out.value_domain is ValueDomain.NORMALIZED_U8
    assert out.header == hu_volume([0] * 5).header


def test_normalize_invalid_window():
    with pytest.raises(InvalidWindow):
        normalize_volume(hu_volume([0]), (400, 400))
    with pytest.raises(InvalidWindow):
        normalize_volume(hu_volume([0]), (500, 400))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-32768, 32767), min_size=2, max_size=50),
       st.integers(-2000, 1000), st.integers(1, 3000))
def test_normalize_range_and_monotone(values, lo, width):
    vals = np.sort(np.array(values))
    out = normalize_volume(hu_volume(vals), (lo, lo + width)).voxels.astype(int)
    assert out.min() >= 0 and out.max() <= 255
    assert np.all(np.diff(out) >= 0)


def test_world_to_voxel_examples():
    h = header(dims=(100, 100, 100), spacing=(2, 2, 2), offset=(-100, -100, -100))
    assert world_to_voxel(h.offset, h) == (0, 0, 0)
    assert world_to_voxel((0, 0, 0), h) == (50, 50, 50)
    with pytest.raises(OutOfBounds) as exc:
        world_to_voxel((100.0, 0, 0), h)
    assert exc.value.axis == 0
    with pytest.raises(OutOfBounds):
        world_to_voxel((-100.0, -100.0, -301.0), h)


def test_voxel_to_world_examples():
    h = header(dims=(10, 10, 10), spacing=(0.7, 0.7, 2.5), offset=(-170, -170, -300))
    assert voxel_to_world((0, 0, 0), h) == h.offset
    unit = header(dims=(10, 10, 10))
    assert voxel_to_world((3, 7, 9), unit) == (3.0, 7.0, 9.0)


@settings(max_examples=50, deadline=None)
@given(headers().filter(lambda h: h.ndims == 3), st.integers(0, 2**32 - 1))
def test_world_voxel_round_trip(h, seed):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        i = tuple(int(rng.integers(0, n)) for n in h.dim_size)
        assert world_to_voxel(voxel_to_world(i, h), h) == i


def u8_volume(arr_zyx):
    arr = np.asarray(arr_zyx, dtype=np.uint8)
    h = header(dims=tuple(reversed(arr.shape)), etype="MET_UCHAR",
               spacing=(0.5, 0.5, 2.0), offset=(-10, -20, -30))
    return Volume3D(h, arr, ValueDomain.NORMALIZED_U8)


def test_extract_patch_unit():
    rng = np.random.default_rng(0)
    v = u8_volume(rng.integers(1, 255, size=(5, 6, 7)))
    p = extract_patch(v, (3, 2, 1), (1, 1, 1))
    assert p.voxels.tolist() == [v[(3, 2, 1)]]
    assert p.header.offset == voxel_to_world((3, 2, 1), v.header)


def test_extract_patch_corner_padding():
    v = u8_volume(np.full((5, 5, 5), 9))
    p = extract_patch(v, (0, 0, 0), (3, 3, 3))
    assert p.voxels.size == 27
    assert int(np.sum(p.voxels == 0)) == 19
    assert p.header.offset == (-10.5, -20.5, -32.0)


def test_extract_patch_uniform_interior():
    v = u8_volume(np.full((9, 9, 9), 77))
    p = extract_patch(v, (4, 4, 4), (5, 3, 7))
    assert p.header.dim_size == (5, 3, 7)
    assert np.all(p.voxels == 77)


def test_extract_patch_rejects_even_size():
    with pytest.raises(ValueError):
        extract_patch(u8_volume(np.zeros((3, 3, 3))), (1, 1, 1), (2, 3, 3))


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.integers(-1000, 1000, size=(4, 5, 6)).astype(np.int16)
    h = MhdHeader(3, (6, 5, 4), "MET_SHORT", (0.7, 0.7, 2.5), (-1.0, 2.0, 3.5), "ignored.raw",
                  extra={"Modality": "MET_MOD_CT"})
    path = write_mhd(tmp_path / "scan.mhd", Volume3D(h, arr))
    back = read_mhd(path)
    assert back.header.element_data_file == "scan.raw"
    assert back.header.extra == {"Modality": "MET_MOD_CT"}
    np.testing.assert_array_equal(back.array, arr)


def test_read_local_payload(tmp_path):
    h = MhdHeader(3, (2, 1, 1), "MET_SHORT", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), LOCAL)
    (tmp_path / "v.mhd").write_bytes(emit_mhd_header(h).encode() + bytes([0, 4, 0, 0]))
    assert read_mhd(tmp_path / "v.mhd").voxels.tolist() == [1024, 0]
