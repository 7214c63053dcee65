"""Sliding-window patch pairs, clip-overlap blending, and the cubic baseline.

Training pairs are cut from matched low-field/high-field volumes on a
regular grid (the high-field grid is the low-field grid scaled by r along
z). Reconstruction assigns every output voxel to exactly one patch, the
one whose centre is nearest, i.e. overlaps are trimmed at their midline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import FormatError, ShapeError
from .volume import Geometry, Volume3D

DEFAULT_PATCH = 32
DEFAULT_STEP = (16, 16, 4)
DEFAULT_BG_THRESHOLD = 0.8

_CACHE_MAGIC = b"IQTP"
_CACHE_VERSION = 1


def _axis_positions(size: int, patch: int, step: int) -> tuple[np.ndarray, int]:
    """Grid start positions along one axis and the padded axis size.

    The volume is zero-padded up to the next grid-aligned size so the last
    patch fits; returns (positions, padded_size).
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if size <= patch:
        return np.array([0]), max(size, patch)
    count = -(-(size - patch) // step) + 1  # ceil division
    positions = np.arange(count) * step
    return positions, int(positions[-1] + patch)


@dataclass(frozen=True)
class PatchGrid:
    """Patch layout over one low-field volume and its high-field partner."""

    lf_dims: tuple[int, int, int]
    patch: tuple[int, int, int]          # low-field patch size
    step: tuple[int, int, int]           # low-field extraction step
    r: int

    def __post_init__(self):
        if any(s < 1 for s in self.step):
            raise ValueError(f"steps must be >= 1, got {self.step}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")

    @property
    def hf_dims(self) -> tuple[int, int, int]:
        nx, ny, nz = self.lf_dims
        return (nx, ny, nz * self.r)

    @property
    def hf_patch(self) -> tuple[int, int, int]:
        px, py, pz = self.patch
        return (px, py, pz * self.r)

    def axis_grid(self, axis: int, domain: str = "lf") -> tuple[np.ndarray, int]:
        scale = self.r if (domain == "hf" and axis == 2) else 1
        size = self.lf_dims[axis] * scale
        patch = self.patch[axis] * scale
        step = self.step[axis] * scale
        return _axis_positions(size, patch, step)

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self.axis_grid(a)[0]) for a in range(3))

    @property
    def n_positions(self) -> int:
        cx, cy, cz = self.counts
        return cx * cy * cz

    def position(self, index: int, domain: str = "lf") -> tuple[int, int, int]:
        cx, cy, cz = self.counts
        ix, rem = divmod(index, cy * cz)
        iy, iz = divmod(rem, cz)
        return tuple(
            int(self.axis_grid(a, domain)[0][i]) for a, i in zip(range(3), (ix, iy, iz))
        )


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Matched low-field/high-field patch pairs with grid provenance."""

    lf_patches: list[np.ndarray]
    hf_patches: list[np.ndarray]
    grid_indices: list[int]
    grid: PatchGrid
    subject: int = 0

    def __len__(self) -> int:
        return len(self.lf_patches)


def _pad_to(data: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    if data.shape == tuple(shape):
        return data
    pads = [(0, t - s) for s, t in zip(data.shape, shape)]
    return np.pad(data, pads)


def extract_pairs(
    lf: Volume3D,
    hf: Volume3D,
    r: int,
    patch: tuple[int, int, int] | None = None,
    step: tuple[int, int, int] | None = None,
    bg_threshold: float = DEFAULT_BG_THRESHOLD,
    subject: int = 0,
) -> PatchSet:
    """Cut matched patch pairs on the sliding-window grid.

    A pair is dropped when the low-field patch's fraction of background
    (exactly zero) voxels exceeds ``bg_threshold``. Volumes are
    zero-padded up to grid-aligned sizes; the padding is implied by the
    returned grid.
    """
    nx, ny, nz = lf.dims
    if hf.dims != (nx, ny, nz * r):
        raise ShapeError("high-field dims must equal low-field dims with nz * r", hf.dims, (nx, ny, nz * r))
    if patch is None:
        if DEFAULT_PATCH % r != 0:
            raise ValueError(f"default patch size {DEFAULT_PATCH} not divisible by r={r}")
        patch = (DEFAULT_PATCH, DEFAULT_PATCH, DEFAULT_PATCH // r)
    if step is None:
        step = (DEFAULT_STEP[0], DEFAULT_STEP[1], max(16 // r, 1))
    grid = PatchGrid(lf_dims=lf.dims, patch=tuple(patch), step=tuple(step), r=r)

    lf_padded = _pad_to(lf.data, tuple(_axis_positions(lf.dims[a], patch[a], step[a])[1] for a in range(3)))
    hf_target = tuple(grid.axis_grid(a, "hf")[1] for a in range(3))
    hf_padded = _pad_to(hf.data, hf_target)

    px, py, pz = grid.patch
    hx, hy, hz = grid.hf_patch
    lf_out, hf_out, indices = [], [], []
    for index in range(grid.n_positions):
        x, y, z = grid.position(index, "lf")
        lf_patch = lf_padded[x : x + px, y : y + py, z : z + pz]
        frac = float(np.count_nonzero(lf_patch == 0.0)) / lf_patch.size
        if frac > bg_threshold:
            continue
        X, Y, Z = grid.position(index, "hf")
        hf_patch = hf_padded[X : X + hx, Y : Y + hy, Z : Z + hz]
        lf_out.append(np.ascontiguousarray(lf_patch))
        hf_out.append(np.ascontiguousarray(hf_patch))
        indices.append(index)
    return PatchSet(lf_patches=lf_out, hf_patches=hf_out, grid_indices=indices, grid=grid, subject=subject)


def _axis_ownership(positions: np.ndarray, patch: int, padded: int) -> list[tuple[int, int]]:
    """Half-open owned interval per patch along one axis.

    A voxel belongs to the patch whose centre is nearest; ties go to the
    later patch, which places the cut exactly on the overlap midline.
    """
    centers = positions + (patch - 1) / 2.0
    bounds = [0]
    for i in range(len(positions) - 1):
        # First coordinate strictly closer to centre i+1 than to centre i,
        # with the equidistant coordinate assigned to patch i+1.
        midline = (centers[i] + centers[i + 1]) / 2.0
        bounds.append(int(np.ceil(midline)))
    bounds.append(padded)
    return [(bounds[i], bounds[i + 1]) for i in range(len(positions))]


def blend_clip(patches: list[np.ndarray], grid: PatchGrid, domain: str = "hf") -> np.ndarray:
    """Reassemble a volume from one patch per grid position.

    Every output voxel is copied from exactly one patch (nearest centre,
    overlap trimmed at the midline); grid padding is cropped afterwards.
    Returns a bare array; callers attach geometry.
    """
    if len(patches) != grid.n_positions:
        raise ValueError(f"need one patch per grid position: got {len(patches)}, grid has {grid.n_positions}")
    scale = grid.r if domain == "hf" else 1
    dims = grid.hf_dims if domain == "hf" else grid.lf_dims
    patch = grid.hf_patch if domain == "hf" else grid.patch

    axes = []
    padded = []
    for a in range(3):
        positions, pad = grid.axis_grid(a, domain)
        axes.append(_axis_ownership(positions, patch[a], pad))
        padded.append(pad)

    out = np.zeros(tuple(padded), dtype=np.asarray(patches[0]).dtype)
    counts = grid.counts
    for index in range(grid.n_positions):
        ix, rem = divmod(index, counts[1] * counts[2])
        iy, iz = divmod(rem, counts[2])
        pos = grid.position(index, domain)
        data = np.asarray(patches[index])
        if data.shape != tuple(patch):
            raise ShapeError("patch has wrong shape", data.shape, tuple(patch))
        (x0, x1), (y0, y1), (z0, z1) = axes[0][ix], axes[1][iy], axes[2][iz]
        out[x0:x1, y0:y1, z0:z1] = data[x0 - pos[0] : x1 - pos[0], y0 - pos[1] : y1 - pos[1], z0 - pos[2] : z1 - pos[2]]
    return out[: dims[0], : dims[1], : dims[2]]


def cubic_upsample_z(vol: Volume3D, r: int) -> Volume3D:
    """One-directional cubic B-spline interpolation along z to r x slices.

    Output slice j samples the interpolant at input position j / r, so
    slice j = k*r coincides with input slice k; the tail extrapolates the
    end polynomial. In-plane content is untouched.
    """
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    nz = vol.dims[2]
    if nz < 4:
        raise ValueError(f"cubic interpolation needs >= 4 slices, got {nz}")
    spline = make_interp_spline(np.arange(nz), vol.data, k=3, axis=2)
    query = np.arange(nz * r) / r
    data = spline(query)
    g = vol.geometry
    geometry = Geometry(g.voxel_x, g.voxel_y, g.slice_thickness / r, g.slice_gap / r)
    return Volume3D(data=data, geometry=geometry)


# ---------------------------------------------------------------------------
# Flat binary patch cache
# ---------------------------------------------------------------------------

def save_patchset(patchset: PatchSet, path: str) -> None:
    """Stream the patch set to a flat binary cache file."""
    grid = patchset.grid
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IIII", _CACHE_VERSION, len(patchset), grid.r, patchset.subject))
        fh.write(struct.pack("<3I", *grid.lf_dims))
        fh.write(struct.pack("<3I", *grid.patch))
        fh.write(struct.pack("<3I", *grid.step))
        for lf_patch, hf_patch, index in zip(patchset.lf_patches, patchset.hf_patches, patchset.grid_indices):
            fh.write(struct.pack("<I", index))
            fh.write(np.ascontiguousarray(lf_patch, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(hf_patch, dtype="<f4").tobytes())


def load_patchset(path: str) -> PatchSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise FormatError(f"{path}: bad patch cache magic {magic!r}")
        version, count, r, subject = struct.unpack("<IIII", fh.read(16))
        if version != _CACHE_VERSION:
            raise FormatError(f"{path}: unsupported cache version {version}")
        lf_dims = struct.unpack("<3I", fh.read(12))
        patch = struct.unpack("<3I", fh.read(12))
        step = struct.unpack("<3I", fh.read(12))
        grid = PatchGrid(lf_dims=lf_dims, patch=patch, step=step, r=r)
        hx, hy, hz = grid.hf_patch
        lf_n = patch[0] * patch[1] * patch[2]
        hf_n = hx * hy * hz
        lf_patches, hf_patches, indices = [], [], []
        for _ in range(count):
            (index,) = struct.unpack("<I", fh.read(4))
            lf_raw = fh.read(lf_n * 4)
            hf_raw = fh.read(hf_n * 4)
            if len(lf_raw) < lf_n * 4 or len(hf_raw) < hf_n * 4:
                raise OSError(f"{path}: truncated patch cache")
            indices.append(index)
            lf_patches.append(np.frombuffer(lf_raw, dtype="<f4").reshape(patch).astype(np.float32))
            hf_patches.append(np.frombuffer(hf_raw, dtype="<f4").reshape((hx, hy, hz)).astype(np.float32))
    return PatchSet(lf_patches=lf_patches, hf_patches=hf_patches, grid_indices=indices, grid=grid, subject=subject)
