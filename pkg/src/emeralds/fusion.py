"""Embeddings, prototype matching and the detection-backend protocol.

The foundation-model stages (prompted segmentation, image/text embedding)
live outside this package. They talk to it through JSON request/response
files and MetaImage masks. Two backends ship in-process: ``file`` replays
responses staged on disk, and ``toy`` thresholds the volume and keeps
nodule-sized connected components.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .annotations import MalignancyLabel
from .errors import (
    BackendUnavailable,
    DimensionMismatch,
    MalformedResponse,
    MissingClass,
    ZeroVector,
)
from .volume_io import (
    DEFAULT_WINDOW,
    MhdHeader,
    ValueDomain,
    Volume3D,
    normalize_volume,
    parse_mhd_header,
    read_mhd,
    write_mhd,
)

__all__ = [
    "BoxPrompt",
    "ClassPrototype",
    "DetectedMask",
    "DetectionBackend",
    "DetectionRequest",
    "DetectionResponse",
    "Embedding",
    "EmbeddingSource",
    "FileBackend",
    "TextPrompt",
    "ToyBackend",
    "build_prototypes",
    "cosine_similarity",
    "detect",
    "mask_from_array",
    "nearest_class",
    "toy_blob_detector",
    "toy_image_encoder",
]

DEFAULT_DIM = 32
HIST_BINS = 16
TIE_TOL = 1e-12


class EmbeddingSource(str, enum.Enum):
    TOY = "toy_encoder"
    EXTERNAL = "external"


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    source: EmbeddingSource = EmbeddingSource.EXTERNAL

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding entries must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def _vec(x) -> np.ndarray:
    return x.values if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64).reshape(-1)


def cosine_similarity(a, b) -> float:
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimensions differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def toy_image_encoder(patch: Volume3D, dim: int = DEFAULT_DIM) -> Embedding:
    """Hand-crafted patch descriptor standing in for a CNN image encoder.

    Layout: 16-bin L1-normalized intensity histogram, then intensity mean
    and std, gradient-magnitude mean and std (all scaled by 1/255), then
    the fraction of voxels above the Otsu threshold, zero-padded to ``dim``.
    """
    if patch.value_domain is not ValueDomain.NORMALIZED_U8:
        raise ValueError("toy_image_encoder expects a normalized [0, 255] patch")
    n_feat = HIST_BINS + 5
    if dim < n_feat:
        raise ValueError(f"dim must be at least {n_feat}")
    arr = patch.array.astype(np.float64)
    hist, _ = np.histogram(arr, bins=HIST_BINS, range=(0.0, 256.0))
    hist = hist / hist.sum()

    axes = [ax for ax in range(arr.ndim) if arr.shape[ax] >= 2]
    if axes:
        grads = np.gradient(arr, axis=axes)
        grads = grads if isinstance(grads, (list, tuple)) else [grads]
        gmag = np.sqrt(sum(g * g for g in grads))
    else:
        gmag = np.zeros_like(arr)

    occupied = float(np.mean(arr > threshold_otsu(arr))) if arr.min() < arr.max() else 0.0
    feats = np.concatenate([
        hist,
        [arr.mean() / 255.0, arr.std() / 255.0, gmag.mean() / 255.0, gmag.std() / 255.0, occupied],
    ])
    out = np.zeros(dim)
    out[:n_feat] = feats
    return Embedding(out, EmbeddingSource.TOY)


@dataclass(frozen=True, eq=False)
class ClassPrototype:
    class_id: MalignancyLabel
    centroid: Embedding
    member_count: int


_CLASS_ORDER = (MalignancyLabel.BENIGN, MalignancyLabel.MALIGNANT)


def build_prototypes(pairs: Sequence[Tuple[object, MalignancyLabel]]) -> List[ClassPrototype]:
    """One centroid per class, Benign first."""
    groups = {c: [] for c in _CLASS_ORDER}
    for emb, label in pairs:
        label = MalignancyLabel(label)
        if label not in groups:
            raise ValueError(f"cannot build a prototype for {label.value!r} samples")
        groups[label].append(_vec(emb))
    for c, members in groups.items():
        if not members:
            raise MissingClass(f"no {c.value} samples")
    dims = {m.size for members in groups.values() for m in members}
    if len(dims) != 1:
        raise DimensionMismatch(f"embeddings have mixed dimensions {sorted(dims)}")
    return [ClassPrototype(c, Embedding(np.mean(np.stack(m), axis=0)), len(m))
            for c, m in groups.items()]


def nearest_class(e, protos: Sequence[ClassPrototype]) -> Tuple[MalignancyLabel, float]:
    """Most cosine-similar prototype; near-ties go to Benign."""
    if not protos:
        raise ValueError("no prototypes given")
    ranked = sorted(protos, key=lambda p: _CLASS_ORDER.index(p.class_id)
                    if p.class_id in _CLASS_ORDER else len(_CLASS_ORDER))
    best, best_sim = None, -np.inf
    for p in ranked:
        sim = cosine_similarity(e, p.centroid)
        if sim > best_sim + TIE_TOL:
            best, best_sim = p.class_id, sim
    return best, best_sim


# --- detection ------------------------------------------------------------

@dataclass(frozen=True)
class TextPrompt:
    value: str

    def __post_init__(self):
        if not self.value.strip():
            raise ValueError("text prompt must not be empty")


@dataclass(frozen=True)
class BoxPrompt:
    """Inclusive voxel bounds ``(x0, y0, z0, x1, y1, z1)``."""

    value: Tuple[int, int, int, int, int, int]

    def __post_init__(self):
        v = tuple(int(c) for c in self.value)
        if len(v) != 6 or any(lo > hi for lo, hi in zip(v[:3], v[3:])):
            raise ValueError(f"malformed box {self.value}")
        object.__setattr__(self, "value", v)

    def check_within(self, header: MhdHeader):
        lo, hi = self.value[:3], self.value[3:]
        if any(l < 0 or h >= n for l, h, n in zip(lo, hi, header.dim_size)):
            raise ValueError(f"box {self.value} exceeds volume size {header.dim_size}")


Prompt = Union[TextPrompt, BoxPrompt]


@dataclass(frozen=True)
class DetectionRequest:
    request_id: str
    volume: Path
    prompt: Prompt = TextPrompt("lung nodule")

    def to_json(self) -> str:
        kind = "text" if isinstance(self.prompt, TextPrompt) else "box"
        value = self.prompt.value if kind == "text" else list(self.prompt.value)
        return json.dumps({"request_id": self.request_id, "volume": str(self.volume),
                           "prompt": {"kind": kind, "value": value}}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DetectionRequest":
        d = json.loads(text)
        p = d["prompt"]
        if p["kind"] == "text":
            prompt = TextPrompt(p["value"])
        elif p["kind"] == "box":
            prompt = BoxPrompt(tuple(p["value"]))
        else:
            raise ValueError(f"unknown prompt kind {p['kind']!r}")
        return cls(str(d["request_id"]), Path(d["volume"]), prompt)


@dataclass(frozen=True, eq=False)
class DetectedMask:
    mask: Volume3D
    confidence: float
    path: Optional[Path] = None


@dataclass(frozen=True, eq=False)
class DetectionResponse:
    request_id: str
    masks: List[DetectedMask] = field(default_factory=list)

    def union(self, header: MhdHeader) -> np.ndarray:
        """Boolean ``(z, y, x)`` union of all masks (all-false when empty)."""
        out = np.zeros(header.shape, dtype=bool)
        for m in self.masks:
            out |= m.mask.array.astype(bool)
        return out

    def write(self, directory) -> Path:
        """Write masks as MET_UCHAR MetaImages plus ``<request_id>.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, m in enumerate(self.masks):
            p = write_mhd(directory / f"{self.request_id}_mask{i}.mhd", m.mask)
            entries.append({"path": p.name, "confidence": float(m.confidence)})
        out = directory / f"{self.request_id}.json"
        out.write_text(json.dumps({"request_id": self.request_id, "masks": entries},
                                  sort_keys=True, indent=1))
        return out

    @classmethod
    def read(cls, path) -> "DetectionResponse":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
            request_id = str(d["request_id"])
            masks = []
            for entry in d["masks"]:
                mask_path = path.parent / entry["path"]
                masks.append(DetectedMask(read_mhd(mask_path), float(entry["confidence"]),
                                          mask_path))
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"{path}: {exc}") from exc
        return cls(request_id, masks)


class DetectionBackend(Protocol):
    def detect(self, req: DetectionRequest) -> DetectionResponse: ...


def mask_from_array(mask: np.ndarray, header: MhdHeader) -> Volume3D:
    """Wrap a ``(z, y, x)`` boolean array as a MET_UCHAR {0, 1} volume."""
    h = replace(header, element_type="MET_UCHAR", byte_order_msb=False, extra={})
    return Volume3D(h, np.asarray(mask, dtype=np.uint8), ValueDomain.NORMALIZED_U8)


def toy_blob_detector(v: Volume3D, threshold: float,
                      diameter_range_mm: Tuple[float, float] = (3.0, 30.0)) -> List[DetectedMask]:
    """Threshold, label 26-connected components, keep nodule-sized ones.

    Size is the diameter of a sphere with the component's physical volume.
    """
    if v.value_domain is not ValueDomain.NORMALIZED_U8:
        raise ValueError("toy_blob_detector expects a normalized [0, 255] volume")
    arr = v.array
    # full connectivity: 26-neighbourhood in 3D
    structure = ndimage.generate_binary_structure(arr.ndim, arr.ndim)
    labels, n = ndimage.label(arr >= threshold, structure=structure)
    if n == 0:
        return []
    voxel_mm3 = float(np.prod(v.header.element_spacing))
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    sums = np.bincount(labels.ravel(), weights=arr.ravel().astype(np.float64), minlength=n + 1)
    lo, hi = diameter_range_mm
    out = []
    for lab in range(1, n + 1):
        diameter = (6.0 * counts[lab] * voxel_mm3 / np.pi) ** (1.0 / 3.0)
        if not lo <= diameter <= hi:
            continue
        confidence = float(np.clip(sums[lab] / counts[lab] / 255.0, 0.0, 1.0))
        out.append(DetectedMask(mask_from_array(labels == lab, v.header), confidence))
    return out


class FileBackend:
    """Replays responses staged as ``<directory>/<request_id>.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def detect(self, req: DetectionRequest) -> DetectionResponse:
        path = self.directory / f"{req.request_id}.json"
        if not path.is_file():
            raise BackendUnavailable(f"no staged response for {req.request_id!r} in {self.directory}")
        return DetectionResponse.read(path)


class ToyBackend:
    """In-process reference backend built on :func:`toy_blob_detector`.

    The text prompt is accepted but carries no meaning here; a box prompt
    restricts detection to the box.
    """

    def __init__(self, threshold: float = 128.0, window=DEFAULT_WINDOW,
                 diameter_range_mm=(3.0, 30.0)):
        self.threshold = threshold
        self.window = window
        self.diameter_range_mm = diameter_range_mm

    def detect(self, req: DetectionRequest) -> DetectionResponse:
        v = read_mhd(req.volume)
        if v.value_domain is ValueDomain.HOUNSFIELD:
            v = normalize_volume(v, self.window)
        if isinstance(req.prompt, BoxPrompt):
            x0, y0, z0, x1, y1, z1 = req.prompt.value
            arr = np.zeros_like(v.array)
            arr[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1] = v.array[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1]
            v = Volume3D(v.header, arr, v.value_domain)
        return DetectionResponse(req.request_id,
                                 toy_blob_detector(v, self.threshold, self.diameter_range_mm))


def _read_header(path: Path) -> MhdHeader:
    blob = path.read_bytes()
    marker = blob.find(b"ElementDataFile")
    end = blob.find(b"\n", marker)
    return parse_mhd_header(blob[: len(blob) if end < 0 else end + 1].decode("utf-8"))


def detect(backend: DetectionBackend, req: DetectionRequest) -> DetectionResponse:
    """Run ``backend`` on ``req`` and enforce the response contract."""
    path = Path(req.volume)
    if not path.is_file():
        raise FileNotFoundError(path)
    header = _read_header(path)
    if isinstance(req.prompt, BoxPrompt):
        req.prompt.check_within(header)
    resp = backend.detect(req)
    if resp.request_id != req.request_id:
        raise MalformedResponse(
            f"response id {resp.request_id!r} does not match request {req.request_id!r}")
    for m in resp.masks:
        if m.mask.header.dim_size != header.dim_size:
            raise MalformedResponse(
                f"mask size {m.mask.header.dim_size} != volume size {header.dim_size}")
        if not 0.0 <= m.confidence <= 1.0:
            raise MalformedResponse(f"confidence {m.confidence} outside [0, 1]")
        vals = m.mask.voxels
        if np.any((vals != 0) & (vals != 1)):
            raise MalformedResponse("mask values must be 0 or 1")
    return resp
