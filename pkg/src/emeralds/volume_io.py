"""ITK MetaImage (``.mhd`` + ``.raw``) volumes, HU windowing and coordinates.

Voxels are kept as a flat array in x-fastest order, which is the MetaImage
on-disk layout; :attr:`Volume3D.array` gives the ``(z, y, x)`` view.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    InvalidWindow,
    MalformedLine,
    MissingKey,
    OutOfBounds,
    PayloadSizeMismatch,
    UnsupportedElementType,
)

__all__ = [
    "ELEMENT_DTYPES",
    "DEFAULT_WINDOW",
    "LOCAL",
    "MhdHeader",
    "ValueDomain",
    "Volume3D",
    "emit_mhd_header",
    "extract_patch",
    "load_volume",
    "normalize_volume",
    "parse_mhd_header",
    "read_mhd",
    "round_half_away",
    "voxel_to_world",
    "world_to_voxel",
    "write_mhd",
]

LOCAL = "LOCAL"

# standard lung window in HU
DEFAULT_WINDOW = (-1000.0, 400.0)

# little-endian dtypes; byte order is swapped at decode time when MSB is set
ELEMENT_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_FLOAT": np.dtype("<f4"),
}

_OFFSET_KEYS = ("Offset", "Origin", "Position")
_MSB_KEYS = ("ElementByteOrderMSB", "BinaryDataByteOrderMSB")
_KNOWN_KEYS = {
    "ObjectType", "NDims", "BinaryData", "DimSize", "ElementType",
    "ElementSpacing", "ElementSize", "ElementDataFile", "CompressedData",
    *_OFFSET_KEYS, *_MSB_KEYS,
}


class ValueDomain(str, enum.Enum):
    HOUNSFIELD = "hounsfield"
    NORMALIZED_U8 = "normalized_u8"


@dataclass(frozen=True)
class MhdHeader:
    """Parsed MetaImage header.

    Triples are in x/y/z order. ``extra`` keeps any key the parser does not
    interpret, so headers survive a parse/emit round trip.
    """

    ndims: int
    dim_size: Tuple[int, ...]
    element_type: str
    element_spacing: Tuple[float, ...]
    offset: Tuple[float, ...]
    element_data_file: str
    byte_order_msb: bool = False
    extra: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.ndims not in (2, 3):
            raise ValueError(f"NDims must be 2 or 3, got {self.ndims}")
        for name in ("dim_size", "element_spacing", "offset"):
            if len(getattr(self, name)) != self.ndims:
                raise ValueError(f"{name} must have {self.ndims} components")
        if any(d <= 0 for d in self.dim_size):
            raise ValueError(f"DimSize components must be positive: {self.dim_size}")
        if any(not s > 0 for s in self.element_spacing):
            raise ValueError(f"ElementSpacing components must be positive: {self.element_spacing}")
        if self.element_type not in ELEMENT_DTYPES:
            raise UnsupportedElementType(self.element_type)

    @property
    def dtype(self) -> np.dtype:
        dt = ELEMENT_DTYPES[self.element_type]
        return dt.newbyteorder(">") if self.byte_order_msb else dt

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dim_size, dtype=np.int64))

    @property
    def shape(self) -> Tuple[int, ...]:
        """Array shape in C order, i.e. ``dim_size`` reversed."""
        return tuple(reversed(self.dim_size))


@dataclass(frozen=True, eq=False)
class Volume3D:
    header: MhdHeader
    voxels: np.ndarray
    value_domain: ValueDomain = ValueDomain.HOUNSFIELD

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.voxels).reshape(-1))
        if v.size != self.header.n_voxels:
            raise ValueError(
                f"voxel count {v.size} does not match DimSize {self.header.dim_size}")
        v.flags.writeable = False
        object.__setattr__(self, "voxels", v)

    @property
    def array(self) -> np.ndarray:
        """Read-only ``(z, y, x)`` view of the voxels."""
        return self.voxels.reshape(self.header.shape)

    def __getitem__(self, index):
        """Voxel at an ``(x, y, z)`` index."""
        return self.array[tuple(reversed(tuple(index)))]


def _parse_bool(value: str, key: str, line_no: int) -> bool:
    v = value.strip().lower()
    if v in ("true", "1"):
        return True
    if v in ("false", "0"):
        return False
    raise MalformedLine(line_no, f"{key} = {value}")


def _parse_numbers(value: str, kind, line_no: int, line: str):
    try:
        return tuple(kind(tok) for tok in value.split())
    except ValueError:
        raise MalformedLine(line_no, line) from None


def parse_mhd_header(text: str) -> MhdHeader:
    """Parse the ``key = value`` lines of a MetaImage header.

    Parsing stops after ``ElementDataFile``, which MetaImage requires to be
    the last key (anything after it is payload for ``LOCAL`` files).
    """
    entries: Dict[str, Tuple[str, int, str]] = {}
    extra: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise MalformedLine(line_no, raw)
        if key in _KNOWN_KEYS:
            entries[key] = (value, line_no, raw)
        else:
            extra[key] = value
        if key == "ElementDataFile":
            break

    for key in ("DimSize", "ElementType", "ElementDataFile"):
        if key not in entries:
            raise MissingKey(key)

    if "ObjectType" in entries and entries["ObjectType"][0].lower() != "image":
        value, line_no, raw = entries["ObjectType"]
        raise MalformedLine(line_no, raw)
    if "CompressedData" in entries:
        value, line_no, _ = entries["CompressedData"]
        if _parse_bool(value, "CompressedData", line_no):
            raise ValueError("compressed MetaImage payloads are not supported")

    value, line_no, raw = entries["DimSize"]
    dim_size = _parse_numbers(value, int, line_no, raw)
    if "NDims" in entries:
        value, line_no, raw = entries["NDims"]
        ndims = _parse_numbers(value, int, line_no, raw)
        if len(ndims) != 1:
            raise MalformedLine(line_no, raw)
        ndims = ndims[0]
    else:
        ndims = len(dim_size)

    element_type = entries["ElementType"][0]
    if element_type not in ELEMENT_DTYPES:
        raise UnsupportedElementType(element_type)

    spacing_key = "ElementSpacing" if "ElementSpacing" in entries else "ElementSize"
    if spacing_key in entries:
        value, line_no, raw = entries[spacing_key]
        spacing = _parse_numbers(value, float, line_no, raw)
    else:
        spacing = (1.0,) * ndims

    offset = (0.0,) * ndims
    for key in _OFFSET_KEYS:
        if key in entries:
            value, line_no, raw = entries[key]
            offset = _parse_numbers(value, float, line_no, raw)
            break

    msb = False
    for key in _MSB_KEYS:
        if key in entries:
            value, line_no, _ = entries[key]
            msb = _parse_bool(value, key, line_no)
            break

    return MhdHeader(
        ndims=ndims,
        dim_size=dim_size,
        element_type=element_type,
        element_spacing=spacing,
        offset=offset,
        element_data_file=entries["ElementDataFile"][0],
        byte_order_msb=msb,
        extra=extra,
    )


def _fmt(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def emit_mhd_header(header: MhdHeader) -> str:
    lines = [
        "ObjectType = Image",
        f"NDims = {header.ndims}",
        "BinaryData = True",
        f"ElementByteOrderMSB = {header.byte_order_msb}",
        "Offset = " + " ".join(_fmt(v) for v in header.offset),
        "ElementSpacing = " + " ".join(_fmt(v) for v in header.element_spacing),
        "DimSize = " + " ".join(str(int(v)) for v in header.dim_size),
    ]
    lines += [f"{k} = {v}" for k, v in header.extra.items()]
    lines += [
        f"ElementType = {header.element_type}",
        f"ElementDataFile = {header.element_data_file}",
    ]
    return "\n".join(lines) + "\n"


def load_volume(header: MhdHeader, payload: bytes) -> Volume3D:
    """Decode a raw payload into a volume.

    Voxel ``(x, y, z)`` sits at flat index ``x + nx * (y + ny * z)``.
    """
    expected = header.n_voxels * header.dtype.itemsize
    if len(payload) != expected:
        raise PayloadSizeMismatch(expected, len(payload))
    data = np.frombuffer(payload, dtype=header.dtype)
    data = data.astype(header.dtype.newbyteorder("="))
    domain = (ValueDomain.NORMALIZED_U8 if header.element_type == "MET_UCHAR"
              else ValueDomain.HOUNSFIELD)
    return Volume3D(header, data, domain)


def read_mhd(path) -> Volume3D:
    """Read an ``.mhd`` file and its payload (separate file or ``LOCAL``)."""
    path = Path(path)
    blob = path.read_bytes()
    marker = blob.find(b"ElementDataFile")
    if marker < 0:
        raise MissingKey("ElementDataFile")
    eol = blob.find(b"\n", marker)
    eol = len(blob) if eol < 0 else eol + 1
    header = parse_mhd_header(blob[:eol].decode("utf-8"))
    if header.element_data_file.upper() == LOCAL:
        payload = blob[eol:]
    else:
        payload = (path.parent / header.element_data_file).read_bytes()
    return load_volume(header, payload)


def write_mhd(path, volume: Volume3D, data_file: Optional[str] = None) -> Path:
    """Write ``volume`` as ``path`` plus a sibling ``.raw`` payload.

    Voxels are cast to the header's element type. Returns the header path.
    """
    path = Path(path)
    raw_name = data_file or path.with_suffix(".raw").name
    header = replace(volume.header, element_data_file=raw_name)
    payload = volume.voxels.astype(header.dtype).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / (raw_name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path.parent / raw_name)
    path.write_text(emit_mhd_header(header))
    return path


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def normalize_volume(v: Volume3D, window: Tuple[float, float] = DEFAULT_WINDOW) -> Volume3D:
    """Map HU values through ``window`` onto integers in ``[0, 255]``."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise InvalidWindow(f"window lower bound {lo} must be below upper bound {hi}")
    if v.value_domain is not ValueDomain.HOUNSFIELD:
        raise ValueError("normalize_volume expects a Hounsfield-domain volume")
    x = v.voxels.astype(np.float64)
    out = round_half_away(255.0 * np.clip((x - lo) / (hi - lo), 0.0, 1.0))
    return Volume3D(v.header, out.astype(np.uint8), ValueDomain.NORMALIZED_U8)


def world_to_voxel(p: Sequence[float], h: MhdHeader) -> Tuple[int, ...]:
    idx = round_half_away(
        (np.asarray(p, dtype=float) - np.asarray(h.offset)) / np.asarray(h.element_spacing))
    out = tuple(int(i) for i in idx)
    for axis, (i, n) in enumerate(zip(out, h.dim_size)):
        if not 0 <= i < n:
            raise OutOfBounds(axis, i, n)
    return out


def _index_to_world(i, h: MhdHeader) -> Tuple[float, ...]:
    w = np.asarray(h.offset) + np.asarray(h.element_spacing) * np.asarray(i, dtype=float)
    return tuple(float(c) for c in w)


def voxel_to_world(i: Sequence[int], h: MhdHeader) -> Tuple[float, ...]:
    return _index_to_world(i, h)


def extract_patch(v: Volume3D, center: Sequence[int], size: Sequence[int]) -> Volume3D:
    """Crop a ``size`` box (x/y/z, odd extents) centered on ``center``.

    Cells falling outside ``v`` are zero. The patch header's offset is the
    world position of its corner voxel, so world coordinates carry over.
    """
    size = tuple(int(s) for s in size)
    center = tuple(int(c) for c in center)
    if len(size) != v.header.ndims or len(center) != v.header.ndims:
        raise ValueError("center and size must match the volume dimensionality")
    if any(s <= 0 or s % 2 == 0 for s in size):
        raise ValueError(f"patch size must be odd and positive, got {size}")

    corner = tuple(c - s // 2 for c, s in zip(center, size))
    src = v.array
    out = np.zeros(tuple(reversed(size)), dtype=src.dtype)
    src_sl, dst_sl = [], []
    # array axes are reversed relative to x/y/z
    for c0, s, n in zip(reversed(corner), reversed(size), src.shape):
        a, b = max(c0, 0), min(c0 + s, n)
        if a >= b:
            break
        src_sl.append(slice(a, b))
        dst_sl.append(slice(a - c0, b - c0))
    else:
        out[tuple(dst_sl)] = src[tuple(src_sl)]

    header = replace(
        v.header,
        dim_size=size,
        offset=_index_to_world(corner, v.header),
        element_data_file=LOCAL,
    )
    return Volume3D(header, out, v.value_domain)
