"""Volumetric data model, minimal NIfTI-1 file IO, and a synthetic brain phantom.

A volume is a 3-D scalar intensity field together with its acquisition
geometry (in-plane voxel size, slice thickness and slice gap along z).
Slice gap is not representable in a NIfTI-1 header, so it travels in a
JSON sidecar ``<name>.geom.json`` next to the image file.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ShapeError

# NIfTI-1 datatype codes supported by the reader.
_DT_INT16 = 4
_DT_FLOAT32 = 16

_HEADER_SIZE = 348
_VOX_OFFSET = 352

MASK_SUM_TOL = 1e-4


@dataclass(frozen=True)
class Geometry:
    """Acquisition geometry in millimetres.

    ``slice_thickness`` is the excited slab width along z and ``slice_gap``
    the unsampled spacing between slabs; the slice pitch is their sum.
    """

    voxel_x: float
    voxel_y: float
    slice_thickness: float
    slice_gap: float = 0.0

    def __post_init__(self):
        if self.voxel_x <= 0 or self.voxel_y <= 0 or self.slice_thickness <= 0:
            raise ValueError(f"voxel sizes and slice thickness must be > 0, got {self}")
        if self.slice_gap < 0:
            raise ValueError(f"slice gap must be >= 0, got {self.slice_gap}")

    @property
    def slice_pitch(self) -> float:
        """Distance between slice centres along z."""
        return self.slice_thickness + self.slice_gap

    @classmethod
    def isotropic(cls, size: float) -> "Geometry":
        return cls(voxel_x=size, voxel_y=size, slice_thickness=size, slice_gap=0.0)


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3-D scalar field with geometry.

    ``data`` has shape (nx, ny, nz) and finite values. Instances are
    treated as immutable: operations return new volumes.
    """

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError("volume data must be 3-D", arr.shape)
        if arr.size == 0:
            raise ValueError("volume data must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, geometry: Geometry | None = None) -> "Volume3D":
        return Volume3D(data=data, geometry=geometry or self.geometry)


def background_mask(vol: Volume3D) -> np.ndarray:
    """Boolean mask of background voxels.

    Background is defined as exactly-zero intensity; phantoms and
    skull-stripped inputs guarantee zero outside the head.
    """
    return vol.data == 0.0


def foreground_mask(vol: Volume3D) -> np.ndarray:
    return vol.data != 0.0


@dataclass(frozen=True, eq=False)
class TissueMasks:
    """Per-voxel probability maps for white matter, grey matter and the rest.

    At every voxel the three probabilities sum to 1 within ``MASK_SUM_TOL``.
    """

    wm: Volume3D
    gm: Volume3D
    oth: Volume3D

    def __post_init__(self):
        dims = self.wm.dims
        for name in ("gm", "oth"):
            other = getattr(self, name)
            if other.dims != dims:
                raise ShapeError("tissue masks must share dims", dims, other.dims)
        total = self.wm.data + self.gm.data + self.oth.data
        if np.any(np.abs(total - 1.0) > MASK_SUM_TOL):
            worst = float(np.max(np.abs(total - 1.0)))
            raise ValueError(f"mask probabilities must sum to 1 +/- {MASK_SUM_TOL}, worst deviation {worst:g}")
        for name in ("wm", "gm", "oth"):
            arr = getattr(self, name).data
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} mask values must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.wm.dims

    def as_dict(self) -> dict[str, Volume3D]:
        return {"wm": self.wm, "gm": self.gm, "oth": self.oth}


# ---------------------------------------------------------------------------
# NIfTI-1 IO (uncompressed single-file subset, identity orientation)
# ---------------------------------------------------------------------------

def _sidecar_path(path: str) -> str:
    base = path[:-4] if path.endswith(".nii") else path
    return base + ".geom.json"


def read_nifti(path: str, slice_gap: float | None = None) -> tuple[Volume3D, dict]:
    """Read an uncompressed single-file NIfTI-1 volume.

    Supports float32 and int16 data with at least 3 dimensions (trailing
    dimensions must be singleton). Slice thickness/gap are taken from the
    ``.geom.json`` sidecar when present, otherwise thickness defaults to
    pixdim[3] with zero gap; ``slice_gap`` overrides the gap either way.

    Returns the volume and the raw header fields as a dict.
    """
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER_SIZE)
        if len(raw) < _HEADER_SIZE:
            raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
        sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
        if sizeof_hdr != _HEADER_SIZE:
            raise FormatError(f"{path}: bad sizeof_hdr {sizeof_hdr} (big-endian or not NIfTI-1)")
        magic = raw[344:348]
        if magic not in (b"n+1\x00",):
            raise FormatError(f"{path}: bad magic {magic!r}, expected b'n+1\\x00'")
        dim = struct.unpack_from("<8h", raw, 40)
        datatype, bitpix = struct.unpack_from("<2h", raw, 70)
        pixdim = struct.unpack_from("<8f", raw, 76)
        vox_offset = struct.unpack_from("<f", raw, 108)[0]
        scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)

        ndim = dim[0]
        if ndim < 3:
            raise FormatError(f"{path}: need >= 3 dims, header has {ndim}")
        if any(d > 1 for d in dim[4 : 1 + ndim]):
            raise FormatError(f"{path}: only 3-D volumes supported, dim={dim[: 1 + ndim]}")
        nx, ny, nz = dim[1], dim[2], dim[3]
        if nx <= 0 or ny <= 0 or nz <= 0:
            raise FormatError(f"{path}: non-positive dims {(nx, ny, nz)}")

        if datatype == _DT_FLOAT32:
            dtype = np.dtype("<f4")
        elif datatype == _DT_INT16:
            dtype = np.dtype("<i2")
        else:
            raise FormatError(f"{path}: unsupported datatype code {datatype}")
        if bitpix != dtype.itemsize * 8:
            raise FormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

        fh.seek(int(vox_offset))
        count = nx * ny * nz
        body = fh.read(count * dtype.itemsize)
        if len(body) < count * dtype.itemsize:
            raise OSError(f"{path}: truncated data section ({len(body)} of {count * dtype.itemsize} bytes)")

    data = np.frombuffer(body, dtype=dtype).reshape((nx, ny, nz), order="F")
    if datatype == _DT_INT16:
        out = data.astype(np.float64)
        if scl_slope != 0.0:
            out = out * scl_slope + scl_inter
        data = out
    else:
        data = data.astype(np.float32)

    thickness, gap = float(pixdim[3]), 0.0
    sidecar = _sidecar_path(path)
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            geom = json.load(fh)
        thickness = float(geom["slice_thickness_mm"])
        gap = float(geom["slice_gap_mm"])
    if slice_gap is not None:
        gap = float(slice_gap)

    header = {
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "magic": magic,
    }
    geometry = Geometry(float(pixdim[1]), float(pixdim[2]), thickness, gap)
    return Volume3D(data=data, geometry=geometry), header


def write_nifti(vol: Volume3D, path: str) -> None:
    """Write a volume as little-endian float32 NIfTI-1 plus geometry sidecar.

    pixdim[3] carries the slice pitch (thickness + gap); the split is
    recorded in ``<name>.geom.json`` so a round trip restores it.
    """
    nx, ny, nz = vol.dims
    g = vol.geometry
    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, _DT_FLOAT32, 32)
    struct.pack_into("<8f", header, 76, 1.0, g.voxel_x, g.voxel_y, g.slice_pitch, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 0.0, 0.0)
    header[344:348] = b"n+1\x00"

    body = np.asfortranarray(vol.data.astype("<f4", copy=False)).tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(header))
            fh.write(b"\x00" * (_VOX_OFFSET - _HEADER_SIZE))
            fh.write(body)
    except OSError:
        raise
    with open(_sidecar_path(path), "w") as fh:
        json.dump({"slice_thickness_mm": g.slice_thickness, "slice_gap_mm": g.slice_gap}, fh)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic brain phantom
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]  # fractional coordinates in [0, 1]^3
    radius: float                       # fraction of the smallest dimension
    intensity: float


@dataclass(frozen=True)
class PhantomConfig:
    """Configuration for the deterministic phantom generator."""

    dims: tuple[int, int, int] = (64, 64, 64)
    geometry: Geometry = field(default_factory=lambda: Geometry.isotropic(1.0))
    seed: int = 0
    mean_wm: float = 1.0
    mean_gm: float = 0.7
    mean_oth: float = 0.35
    deformation: float = 0.08
    modulation: float = 0.01
    edge_width: float = 0.012
    lesions: tuple[Lesion, ...] = ()

    def __post_init__(self):
        if any(d < 16 for d in self.dims):
            raise ValueError(f"phantom dims must be >= (16,16,16), got {self.dims}")
        if min(self.mean_wm, self.mean_gm, self.mean_oth) <= 0:
            raise ValueError("tissue mean intensities must be > 0")

    @classmethod
    def from_json(cls, doc: dict) -> "PhantomConfig":
        kwargs = dict(doc)
        if "geometry" in kwargs:
            kwargs["geometry"] = Geometry(**kwargs["geometry"])
        if "dims" in kwargs:
            kwargs["dims"] = tuple(kwargs["dims"])
        if "lesions" in kwargs:
            kwargs["lesions"] = tuple(
                Lesion(tuple(l["center"]), l["radius"], l["intensity"]) for l in kwargs["lesions"]
            )
        return cls(**kwargs)


# Shell radii in deformed-radius units: WM core, GM shell, brain boundary.
_R_WM = 0.55
_R_GM = 0.82
_R_BRAIN = 1.0


def _smooth_field(shape, rng, n_waves, max_cycles, amplitude):
    """Sum of random low-frequency 3-D cosines, zero mean, unit-ish scale."""
    nx, ny, nz = shape
    xs = np.linspace(0.0, 1.0, nx)[:, None, None]
    ys = np.linspace(0.0, 1.0, ny)[None, :, None]
    zs = np.linspace(0.0, 1.0, nz)[None, None, :]
    out = np.zeros(shape)
    for _ in range(n_waves):
        k = rng.uniform(1.0, max_cycles, size=3) * 2.0 * np.pi
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        out += np.cos(k[0] * xs + phase[0]) * np.cos(k[1] * ys + phase[1]) * np.cos(k[2] * zs + phase[2])
    out *= amplitude / np.sqrt(n_waves)
    return out


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume3D, TissueMasks]:
    """Generate a deterministic soft-tissue phantom with known masks.

    Concentric, smoothly deformed ellipsoidal shells assign WM core, GM
    shell and CSF/other probabilities inside the head; intensity is the
    mask-weighted mix of the configured tissue means with a small smooth
    modulation, and exactly zero outside the head.
    """
    rng = np.random.default_rng(cfg.seed)
    nx, ny, nz = cfg.dims

    xs = np.linspace(-1.0, 1.0, nx)[:, None, None]
    ys = np.linspace(-1.0, 1.0, ny)[None, :, None]
    zs = np.linspace(-1.0, 1.0, nz)[None, None, :]
    # Ellipsoid slightly smaller than the grid so background surrounds it.
    rho = np.sqrt((xs / 0.82) ** 2 + (ys / 0.86) ** 2 + (zs / 0.80) ** 2)

    deform = _smooth_field(cfg.dims, rng, n_waves=6, max_cycles=3.0, amplitude=cfg.deformation)
    rho = rho * (1.0 + deform)

    t = cfg.edge_width

    def inside(radius):
        # Logistic shell indicator, ~1 well inside `radius`, ~0 outside.
        return 1.0 / (1.0 + np.exp((rho - radius) / t))

    p_wm = inside(_R_WM)
    p_gm_cum = inside(_R_GM)
    support = rho < _R_BRAIN

    wm = np.where(support, p_wm, 0.0)
    gm = np.where(support, p_gm_cum - p_wm, 0.0)
    gm = np.clip(gm, 0.0, 1.0)
    oth = 1.0 - wm - gm

    intensity = cfg.mean_wm * wm + cfg.mean_gm * gm + cfg.mean_oth * oth
    texture = _smooth_field(cfg.dims, rng, n_waves=8, max_cycles=9.0, amplitude=cfg.modulation)
    intensity = intensity * (1.0 + texture)

    for lesion in cfg.lesions:
        cx, cy, cz = lesion.center
        radius = lesion.radius * min(cfg.dims)
        dist = np.sqrt(
            ((np.arange(nx)[:, None, None] - cx * (nx - 1)) ** 2)
            + ((np.arange(ny)[None, :, None] - cy * (ny - 1)) ** 2)
            + ((np.arange(nz)[None, None, :] - cz * (nz - 1)) ** 2)
        )
        blend = 1.0 / (1.0 + np.exp((dist - radius) / max(radius * 0.15, 0.5)))
        intensity = intensity * (1.0 - blend) + lesion.intensity * blend

    intensity = np.where(support, intensity, 0.0)

    geom = cfg.geometry
    vol = Volume3D(data=intensity, geometry=geom)
    masks = TissueMasks(
        wm=Volume3D(data=wm, geometry=geom),
        gm=Volume3D(data=gm, geometry=geom),
        oth=Volume3D(data=oth, geometry=geom),
    )
    return vol, masks
