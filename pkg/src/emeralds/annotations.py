"""LIDC-style reader annotations, LUNA16-style consensus and malignancy labels."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import astuple, dataclass, fields
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .errors import BadRow, KOutOfRange, ScoreOutOfRange

__all__ = [
    "CSV_COLUMNS",
    "ConsensusNodule",
    "DEFAULT_RANKING",
    "FEATURE_NAMES",
    "MalignancyLabel",
    "NoduleAnnotation",
    "RadiomicVector",
    "cluster_and_consensus",
    "format_annotations",
    "malignancy_label",
    "parse_annotations",
    "select_top_k",
]

FEATURE_NAMES = (
    "subtlety",
    "internal_texture",
    "spiculation",
    "margin",
    "lobulation",
    "calcification",
    "sphericity",
)

# LIDC uses 1-6 for calcification (6 = absent), 1-5 for everything else
SCORE_RANGES = {name: (1.0, 6.0 if name == "calcification" else 5.0) for name in FEATURE_NAMES}

# Shipped so tests and CLI runs are deterministic without a trained model.
DEFAULT_RANKING = (
    "spiculation",
    "lobulation",
    "margin",
    "subtlety",
    "sphericity",
    "internal_texture",
    "calcification",
)

CSV_COLUMNS = ("scan_id", "reader_id", "x_mm", "y_mm", "z_mm", "diameter_mm",
               *FEATURE_NAMES, "malignancy")

EXCLUSION_TOL = 1e-9


@dataclass(frozen=True)
class RadiomicVector:
    """The seven reader-scored nodule attributes, in :data:`FEATURE_NAMES` order."""

    subtlety: float
    internal_texture: float
    spiculation: float
    margin: float
    lobulation: float
    calcification: float
    sphericity: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "RadiomicVector":
        if len(values) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} radiomic values")
        return cls(*(float(v) for v in values))

    def validate(self):
        for f in fields(self):
            lo, hi = SCORE_RANGES[f.name]
            value = getattr(self, f.name)
            if not lo <= value <= hi:
                raise ScoreOutOfRange(f.name, value)


@dataclass(frozen=True)
class NoduleAnnotation:
    scan_id: str
    reader_id: int
    center_world: Tuple[float, float, float]
    diameter_mm: float
    radiomics: RadiomicVector
    malignancy: int


@dataclass(frozen=True)
class ConsensusNodule:
    scan_id: str
    center_world: Tuple[float, float, float]
    diameter_mm: float
    radiomics: RadiomicVector
    malignancy_mean: float
    reader_count: int


class MalignancyLabel(str, enum.Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"
    EXCLUDED = "excluded"


def _parse_row(row: dict, line_no: int) -> NoduleAnnotation:
    try:
        scan_id = row["scan_id"].strip()
        reader_id = int(row["reader_id"])
        center = tuple(float(row[k]) for k in ("x_mm", "y_mm", "z_mm"))
        diameter = float(row["diameter_mm"])
        scores = [float(row[name]) for name in FEATURE_NAMES]
        malignancy_raw = float(row["malignancy"])
    except (TypeError, ValueError, AttributeError) as exc:
        raise BadRow(line_no, str(exc)) from None
    if not scan_id:
        raise BadRow(line_no, "empty scan_id")
    if not all(math.isfinite(c) for c in center):
        raise BadRow(line_no, "non-finite center coordinate")
    if not 1 <= reader_id <= 4:
        raise ScoreOutOfRange("reader_id", reader_id)
    if not diameter > 0:
        raise ScoreOutOfRange("diameter_mm", diameter)
    if not (malignancy_raw.is_integer() and 1 <= malignancy_raw <= 5):
        raise ScoreOutOfRange("malignancy", row["malignancy"])
    radiomics = RadiomicVector(*scores)
    radiomics.validate()
    return NoduleAnnotation(scan_id, reader_id, center, diameter, radiomics, int(malignancy_raw))


def parse_annotations(text: str) -> List[NoduleAnnotation]:
    """Parse one-row-per-reader annotation CSV.

    Raises on the first bad row rather than returning a partial list.
    """
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise BadRow(1, f"missing columns: {', '.join(missing)}")
    out = []
    for row in reader:
        if None in row or any(v is None for v in row.values()):
            raise BadRow(reader.line_num, "wrong number of fields")
        out.append(_parse_row(row, reader.line_num))
    return out


def format_annotations(anns: Iterable[NoduleAnnotation]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for a in anns:
        writer.writerow([a.scan_id, a.reader_id, *(repr(float(c)) for c in a.center_world),
                         repr(float(a.diameter_mm)),
                         *(_score_str(v) for v in astuple(a.radiomics)), a.malignancy])
    return buf.getvalue()


def _score_str(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _sort_key(a: NoduleAnnotation):
    return (a.reader_id, a.center_world, a.diameter_mm, astuple(a.radiomics), a.malignancy)


def cluster_and_consensus(
    anns: Sequence[NoduleAnnotation],
    min_readers: int = 3,
    min_diameter_mm: float = 3.0,
    match_radius_mm: float = 5.0,
) -> List[ConsensusNodule]:
    """Merge reader marks into consensus nodules.

    Marks on the same scan whose centers lie within ``match_radius_mm`` are
    linked (single linkage). A cluster survives when it was marked by at
    least ``min_readers`` distinct readers and its mean diameter is at least
    ``min_diameter_mm``. Output is sorted by scan and center, and members are
    averaged in a canonical order, so the result does not depend on input
    order.
    """
    if not 1 <= min_readers <= 4:
        raise ValueError(f"min_readers must be in 1..4, got {min_readers}")
    by_scan = {}
    for a in anns:
        by_scan.setdefault(a.scan_id, []).append(a)

    out = []
    for scan_id, group in by_scan.items():
        group = sorted(group, key=_sort_key)
        centers = np.array([a.center_world for a in group], dtype=float)
        adjacency = cdist(centers, centers) <= match_radius_mm
        _, labels = connected_components(adjacency, directed=False)
        for lab in np.unique(labels):
            members = [a for a, l in zip(group, labels) if l == lab]
            readers = {a.reader_id for a in members}
            if len(readers) < min_readers:
                continue
            diameter = float(np.mean([a.diameter_mm for a in members]))
            if diameter < min_diameter_mm:
                continue
            center = tuple(float(c) for c in np.mean([a.center_world for a in members], axis=0))
            radiomics = RadiomicVector.from_array(
                np.mean([a.radiomics.as_array() for a in members], axis=0))
            out.append(ConsensusNodule(
                scan_id=scan_id,
                center_world=center,
                diameter_mm=diameter,
                radiomics=radiomics,
                malignancy_mean=float(np.mean([a.malignancy for a in members])),
                reader_count=len(readers),
            ))
    out.sort(key=lambda n: (n.scan_id, n.center_world))
    return out


def malignancy_label(m: float) -> MalignancyLabel:
    """Scores above 3 are malignant, below 3 benign, exactly 3 excluded."""
    if abs(m - 3.0) <= EXCLUSION_TOL:
        return MalignancyLabel.EXCLUDED
    return MalignancyLabel.MALIGNANT if m > 3.0 else MalignancyLabel.BENIGN


def select_top_k(ranking: Sequence[str], k: int) -> Tuple[str, ...]:
    if sorted(ranking) != sorted(FEATURE_NAMES):
        raise ValueError(f"ranking must be a permutation of {FEATURE_NAMES}")
    if not 1 <= k <= len(FEATURE_NAMES):
        raise KOutOfRange(f"k must be in 1..{len(FEATURE_NAMES)}, got {k}")
    return tuple(ranking[:k])
