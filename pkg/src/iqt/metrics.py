"""Quantitative evaluation: PSNR, SSIM, and relative volumetric error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError
from .volume import Geometry, Volume3D

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(estimate: Volume3D, reference: Volume3D) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the reference.

    Identical inputs return inf. The peak follows the reference image
    maximum because MR intensities have no fixed nominal range.
    """
    if estimate.dims != reference.dims:
        raise ShapeError("volumes must share dims", estimate.dims, reference.dims)
    est = estimate.data.astype(np.float64)
    ref = reference.data.astype(np.float64)
    mse = float(np.mean((est - ref) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(ref.max())
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    taps = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def _local_mean(data: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable windowed mean, cropped to centers where the window fits."""
    out = data
    for axis in range(3):
        out = correlate1d(out, taps, axis=axis, mode="constant")
    half = (len(taps) - 1) // 2
    return out[half:-half, half:-half, half:-half]


def ssim(estimate: Volume3D, reference: Volume3D) -> float:
    """Mean structural similarity with a 3-D Gaussian window.

    Local statistics use an 11^3 window with sigma 1.5; the dynamic range
    is the reference max minus min. Only window positions fully inside
    the volume contribute.
    """
    if estimate.dims != reference.dims:
        raise ShapeError("volumes must share dims", estimate.dims, reference.dims)
    if any(d < SSIM_WINDOW for d in estimate.dims):
        raise ValueError(f"volume dims {estimate.dims} smaller than SSIM window {SSIM_WINDOW}")
    x = estimate.data.astype(np.float64)
    y = reference.data.astype(np.float64)
    dynamic_range = float(y.max() - y.min())
    if dynamic_range == 0.0:
        dynamic_range = 1.0
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2

    taps = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = _local_mean(x, taps)
    mu_y = _local_mean(y, taps)
    xx = _local_mean(x * x, taps)
    yy = _local_mean(y * y, taps)
    xy = _local_mean(x * y, taps)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer structure labels on a voxel grid with geometry."""

    labels: np.ndarray
    geometry: Geometry
    legend: dict[int, str] | None = None

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise ShapeError("label volume must be 3-D", arr.shape)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
        if arr.min(initial=0) < 0:
            raise ValueError("labels must be >= 0")
        object.__setattr__(self, "labels", arr)

    @property
    def dims(self):
        return self.labels.shape

    def structure_volume_mm3(self, structure_id: int) -> float:
        count = int(np.count_nonzero(self.labels == structure_id))
        g = self.geometry
        return count * g.voxel_x * g.voxel_y * g.slice_pitch


def rve(labels_est: LabelVolume, labels_gold: LabelVolume, structure_id: int) -> float:
    """Relative volumetric error 2|V - V*| / (V + V*) for one structure.

    Ranges over [0, 2]; 0 at equal volumes, 2 when the structure is
    entirely missing from one side.
    """
    if labels_est.dims != labels_gold.dims:
        raise ShapeError("label volumes must share dims", labels_est.dims, labels_gold.dims)
    v_est = labels_est.structure_volume_mm3(structure_id)
    v_gold = labels_gold.structure_volume_mm3(structure_id)
    if v_est == 0.0 and v_gold == 0.0:
        raise ValueError(f"structure {structure_id} absent from both label volumes")
    return 2.0 * abs(v_est - v_gold) / (v_est + v_gold)
