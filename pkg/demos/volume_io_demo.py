"""
Reading, windowing and cropping a MetaImage CT volume
=====================================================

"""

import tempfile
from pathlib import Path

import numpy as np

from emeralds.synthetic import sphere_phantom
from emeralds.volume_io import (
    emit_mhd_header,
    extract_patch,
    normalize_volume,
    read_mhd,
    voxel_to_world,
    world_to_voxel,
    write_mhd,
)

# A phantom: lung-like background at about -850 HU with one 6 mm nodule.
vol, truth = sphere_phantom(shape_xyz=(48, 48, 32), center_mm=(24.0, 24.0, 16.0), diameter_mm=6.0)
print("array shape (z, y, x):", vol.array.shape, "dtype:", vol.array.dtype)

# Write it as a .mhd header plus a .raw payload, then read it back.
workdir = Path(tempfile.mkdtemp())
path = write_mhd(workdir / "phantom.mhd", vol)
print(path.read_text().split("ElementDataFile")[0])
back = read_mhd(path)
assert np.array_equal(back.array, vol.array)

# The header text format round-trips exactly.
print(emit_mhd_header(back.header))

# Lung window: clip to [-1000, 400] HU and rescale to 0..255.
u8 = normalize_volume(back)
print("normalized range:", u8.voxels.min(), u8.voxels.max())

# World millimetres and voxel indices map onto each other.
ijk = world_to_voxel((24.0, 24.0, 16.0), u8.header)
print("nodule centre voxel:", ijk, "-> world", voxel_to_world(ijk, u8.header))

# A 9^3 patch around the nodule; its offset records where it came from.
patch = extract_patch(u8, ijk, (9, 9, 9))
print("patch offset:", patch.header.offset, "mean intensity:", patch.voxels.mean().round(1))

# Near the border the patch is zero-padded.
corner = extract_patch(u8, (0, 0, 0), (3, 3, 3))
print("padded cells in a corner patch:", int((corner.voxels == 0).sum()))
