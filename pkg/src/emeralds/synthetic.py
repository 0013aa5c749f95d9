"""Synthetic nodules, phantom CT volumes and a small on-disk dataset.

Nothing here comes from real patients. Nodule attributes hang off a latent
malignancy risk so radiomics, reader malignancy scores and (through the EMR
generator) clinical fields are all genuinely related to the label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .annotations import (
    FEATURE_NAMES,
    ConsensusNodule,
    NoduleAnnotation,
    RadiomicVector,
    format_annotations,
)
from .fusion import mask_from_array
from .volume_io import MhdHeader, ValueDomain, Volume3D, write_mhd

__all__ = [
    "PhantomNodule",
    "random_consensus_nodules",
    "reader_annotations",
    "render_phantom",
    "sphere_mask",
    "sphere_phantom",
    "write_phantom_dataset",
]

BACKGROUND_HU = -850.0
NOISE_HU = 25.0

# per-feature loading on the latent risk (LIDC scales; margin 5 = sharp)
_LOADINGS = {
    "subtlety": 0.5,
    "internal_texture": 0.4,
    "spiculation": 0.9,
    "margin": -0.7,
    "lobulation": 0.8,
    "sphericity": -0.3,
}


def _reader_scores(rng, centre: np.ndarray, n_readers: int, lo=1, hi=5) -> np.ndarray:
    """Integer reader scores scattered around a continuous nodule value."""
    raw = centre[:, None] + rng.normal(0.0, 0.6, size=(centre.size, n_readers))
    return np.clip(np.floor(raw + 0.5), lo, hi)


def _latent_nodules(rng, n: int, n_readers: int = 4) -> Dict[str, np.ndarray]:
    """Per-reader scores, shape (n, n_readers), for every attribute."""
    z = rng.normal(size=n)
    out = {"risk": z}
    for name, load in _LOADINGS.items():
        centre = 3.0 + load * 1.3 * z + rng.normal(0.0, 0.9, size=n)
        out[name] = _reader_scores(rng, centre, n_readers)
    calcified = rng.random(n) < expit(-1.2 - 1.5 * z)
    calc_centre = np.where(calcified, rng.uniform(1.0, 5.0, size=n), 6.0)
    out["calcification"] = _reader_scores(rng, calc_centre, n_readers, hi=6)
    out["malignancy"] = _reader_scores(rng, 3.0 + 1.3 * z, n_readers)
    out["diameter"] = 4.0 + 12.0 * expit(0.8 * z + rng.normal(0.0, 0.8, size=n))
    return out


def random_consensus_nodules(n: int, seed: int = 0, scan_prefix: str = "MC",
                             nodules_per_scan: int = 4) -> List[ConsensusNodule]:
    """Consensus nodules with four-reader mean scores, for Monte-Carlo work."""
    rng = np.random.default_rng(seed)
    lat = _latent_nodules(rng, n)
    out = []
    for i in range(n):
        radiomics = RadiomicVector(*(float(lat[f][i].mean()) for f in FEATURE_NAMES))
        out.append(ConsensusNodule(
            scan_id=f"{scan_prefix}{i // nodules_per_scan:06d}",
            center_world=(float(10 * (i % nodules_per_scan)), 0.0, 0.0),
            diameter_mm=float(lat["diameter"][i]),
            radiomics=radiomics,
            malignancy_mean=float(lat["malignancy"][i].mean()),
            reader_count=4,
        ))
    return out


# --- phantoms -------------------------------------------------------------

def _grid_mm(header: MhdHeader):
    """World coordinates of voxel centres as (z, y, x)-shaped arrays."""
    axes = [header.offset[i] + header.element_spacing[i] * np.arange(header.dim_size[i])
            for i in range(3)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return x, y, z


def sphere_mask(header: MhdHeader, center_mm: Sequence[float], diameter_mm: float) -> np.ndarray:
    """Voxels whose centres lie inside the sphere, as a (z, y, x) bool array."""
    x, y, z = _grid_mm(header)
    r2 = (x - center_mm[0]) ** 2 + (y - center_mm[1]) ** 2 + (z - center_mm[2]) ** 2
    return r2 <= (diameter_mm / 2.0) ** 2


def _header(shape_xyz, spacing=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0)) -> MhdHeader:
    return MhdHeader(3, tuple(shape_xyz), "MET_SHORT", tuple(map(float, spacing)),
                     tuple(map(float, offset)), "LOCAL")


def sphere_phantom(shape_xyz=(48, 48, 32), center_mm=(24.0, 24.0, 16.0), diameter_mm=6.0,
                   spacing=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0), seed=0,
                   nodule_hu=40.0) -> Tuple[Volume3D, np.ndarray]:
    """HU volume with one bright sphere in noisy lung background.

    Returns the volume and the analytic sphere mask.
    """
    header = _header(shape_xyz, spacing, offset)
    rng = np.random.default_rng(seed)
    arr = BACKGROUND_HU + rng.normal(0.0, NOISE_HU, size=header.shape)
    mask = sphere_mask(header, center_mm, diameter_mm)
    arr[mask] = nodule_hu + rng.normal(0.0, NOISE_HU, size=int(mask.sum()))
    return Volume3D(header, np.round(arr).astype(np.int16), ValueDomain.HOUNSFIELD), mask


@dataclass(frozen=True)
class PhantomNodule:
    center_mm: Tuple[float, float, float]
    diameter_mm: float
    radiomics: RadiomicVector
    malignancy: float


def render_phantom(header: MhdHeader, nodules: Sequence[PhantomNodule],
                   seed: int = 0) -> Tuple[Volume3D, np.ndarray]:
    """Render nodules whose look follows their radiomics.

    Low internal texture (ground glass) is fainter, spiculation adds radial
    spikes, and calcification adds a dense core. The returned truth mask is
    the union of the plain spheres.
    """
    rng = np.random.default_rng(seed)
    arr = BACKGROUND_HU + rng.normal(0.0, NOISE_HU, size=header.shape)
    truth = np.zeros(header.shape, dtype=bool)
    x, y, z = _grid_mm(header)
    for nod in nodules:
        r = nod.diameter_mm / 2.0
        dx, dy, dz = x - nod.center_mm[0], y - nod.center_mm[1], z - nod.center_mm[2]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        sphere = dist <= r
        truth |= sphere
        solid = np.clip((nod.radiomics.internal_texture - 1.0) / 4.0, 0.0, 1.0)
        hu = -200.0 + 250.0 * solid
        body = sphere.copy()
        spic = np.clip((nod.radiomics.spiculation - 1.0) / 4.0, 0.0, 1.0)
        if spic > 0:
            n_spikes = int(round(2 + 10 * spic))
            dirs = rng.normal(size=(n_spikes, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            length = r * (1.0 + 0.8 * spic)
            for d in dirs:
                along = dx * d[0] + dy * d[1] + dz * d[2]
                perp2 = dist ** 2 - along ** 2
                body |= (along > 0) & (along <= length) & (perp2 <= 0.6 ** 2)
        arr[body] = hu + rng.normal(0.0, NOISE_HU, size=int(body.sum()))
        if nod.radiomics.calcification < 5.5:
            core = dist <= max(r * 0.45, 0.9)
            arr[core] = 500.0 + rng.normal(0.0, NOISE_HU, size=int(core.sum()))
    vol = Volume3D(header, np.round(arr).astype(np.int16), ValueDomain.HOUNSFIELD)
    return vol, truth


def reader_annotations(scan_id: str, center_mm, diameter_mm: float,
                       reader_scores: Dict[str, np.ndarray], rng,
                       n_readers: int = 4) -> List[NoduleAnnotation]:
    """Per-reader marks with small centre/diameter jitter."""
    out = []
    for r in range(n_readers):
        centre = tuple(float(c + rng.normal(0.0, 0.5)) for c in center_mm)
        diameter = float(max(diameter_mm + rng.normal(0.0, 0.4), 1.0))
        radiomics = RadiomicVector(*(float(reader_scores[f][r]) for f in FEATURE_NAMES))
        out.append(NoduleAnnotation(scan_id, r + 1, centre, diameter, radiomics,
                                    int(reader_scores["malignancy"][r])))
    return out


def write_phantom_dataset(root, n_scans: int = 150, nodules_per_scan: int = 6,
                          shape_xyz=(64, 64, 32), seed: int = 0,
                          annotation_only: int = 9100) -> dict:
    """Write a complete toy dataset under ``root``.

    Layout::

        scans/<scan_id>.mhd|.raw   HU volumes (MET_SHORT)
        masks/<scan_id>.mhd|.raw   ground-truth nodule masks (MET_UCHAR)
        annotations.csv            one row per reader mark

    Nodules sit on a coarse grid so they never touch. ``annotation_only``
    extra nodules are annotated on scans that have no volume on disk, the
    way an annotation export usually covers more scans than are downloaded;
    they give the EMR bias checks a realistic cohort size. Returns a summary
    dict (also written to ``dataset.json``).
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    header0 = _header(shape_xyz, offset=(-32.0, -32.0, -16.0))
    nx, ny, nz = shape_xyz
    slots = [(ix, iy) for ix in range(3) for iy in range(2)]
    if nodules_per_scan > len(slots):
        raise ValueError(f"at most {len(slots)} nodules per scan fit the layout")
    lat = _latent_nodules(rng, n_scans * nodules_per_scan)

    annotations: List[NoduleAnnotation] = []
    k = 0
    for s in range(n_scans):
        scan_id = f"PH{s:04d}"
        nodules = []
        for ix, iy in slots[:nodules_per_scan]:
            cx = header0.offset[0] + (ix + 0.5) * nx / 3 + rng.uniform(-2, 2)
            cy = header0.offset[1] + (iy + 0.5) * ny / 2 + rng.uniform(-2, 2)
            cz = header0.offset[2] + nz / 2 + rng.uniform(-2, 2)
            scores = {f: lat[f][k] for f in (*FEATURE_NAMES, "malignancy")}
            diameter = float(lat["diameter"][k])
            mean_rad = RadiomicVector(*(float(scores[f].mean()) for f in FEATURE_NAMES))
            nodules.append(PhantomNodule((cx, cy, cz), diameter, mean_rad,
                                         float(scores["malignancy"].mean())))
            annotations += reader_annotations(scan_id, (cx, cy, cz), diameter, scores, rng)
            k += 1
        vol, truth = render_phantom(header0, nodules, seed=seed * 100003 + s)
        write_mhd(root / "scans" / f"{scan_id}.mhd", vol)
        write_mhd(root / "masks" / f"{scan_id}.mhd", mask_from_array(truth, header0))

    extra = _latent_nodules(rng, annotation_only)
    for i in range(annotation_only):
        scores = {f: extra[f][i] for f in (*FEATURE_NAMES, "malignancy")}
        centre = (float(20 * (i % 4)), 0.0, 0.0)
        annotations += reader_annotations(f"AN{i // 4:05d}", centre,
                                          float(extra["diameter"][i]), scores, rng)

    (root / "annotations.csv").write_text(format_annotations(annotations))
    summary = {"n_scans": n_scans, "nodules_per_scan": nodules_per_scan,
               "shape_xyz": list(shape_xyz), "seed": seed,
               "annotation_only_nodules": annotation_only,
               "n_annotations": len(annotations)}
    (root / "dataset.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary
