"""Stochastic low-field image simulator.

Degrades a high-field volume into a synthetic low-field one: a Gaussian
slice-profile blur and decimation along z, a randomly sampled per-tissue
SNR that rescales WM and GM signal, and additive Gaussian noise. The SNR
pair is drawn from a bivariate Gaussian fitted to clinical low-field data;
per-contrast defaults ship with the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, ShapeError
from .volume import Geometry, TissueMasks, Volume3D, background_mask

# Sampled SNRs below this are clamped; the fitted Gaussian has unbounded
# support but non-positive SNR is physically meaningless.
SNR_FLOOR = 1.0

_FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))
_KERNEL_TRUNCATION = 4.0  # in units of the Gaussian sigma, in mm


@dataclass(frozen=True)
class SNRDistribution:
    """Bivariate Gaussian over (SNR_wm, SNR_gm) at low field."""

    mean: tuple[float, float]
    covariance: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if mean.shape != (2,) or cov.shape != (2, 2):
            raise ShapeError("SNR distribution needs a 2-vector mean and 2x2 covariance", mean.shape, cov.shape)
        if np.any(mean <= 0):
            raise ValueError(f"mean SNRs must be > 0, got {self.mean}")
        if abs(cov[0, 1] - cov[1, 0]) > 1e-9 * max(1.0, abs(cov[0, 1])):
            raise ValueError("covariance must be symmetric")

    def mean_vector(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=float)

    def cov_matrix(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=float)

    def factor(self) -> np.ndarray:
        """Lower-triangular square root of the covariance.

        Cholesky where the matrix is positive definite, with an
        eigenvalue-based fallback for the semi-definite boundary
        (e.g. an exactly zero covariance for degenerate sampling).
        """
        cov = self.cov_matrix()
        if not cov.any():
            return np.zeros((2, 2))
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            evals, evecs = np.linalg.eigh(cov)
            tol = 1e-10 * max(1.0, float(evals.max(initial=0.0)))
            if evals.min() < -tol:
                raise ValueError(f"covariance is not positive semi-definite (eigenvalues {evals})")
            return evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))

    @classmethod
    def degenerate(cls, mean: tuple[float, float]) -> "SNRDistribution":
        return cls(mean=tuple(mean), covariance=((0.0, 0.0), (0.0, 0.0)))

    @classmethod
    def from_json(cls, doc: dict) -> "SNRDistribution":
        mean = tuple(doc["mean"])
        cov = tuple(tuple(row) for row in doc["covariance"])
        return cls(mean=mean, covariance=cov)


# Default distributions fitted per contrast on clinical 0.36T data.
DEFAULT_DISTRIBUTIONS: dict[str, SNRDistribution] = {
    "t1w": SNRDistribution(mean=(64.50, 54.14), covariance=((78.47, 71.50), (71.50, 73.91))),
    "t2w": SNRDistribution(mean=(35.20, 48.46), covariance=((84.15, 104.89), (104.89, 138.70))),
    "flair": SNRDistribution(mean=(35.99, 40.92), covariance=((100.99, 74.34), (74.34, 129.56))),
}


@dataclass(frozen=True)
class ContrastSample:
    """One draw of the low-field contrast: SNR pair plus noise levels."""

    snr_wm: float
    snr_gm: float
    sigma_x: float
    sigma_y: float

    def __post_init__(self):
        if self.snr_wm < SNR_FLOOR or self.snr_gm < SNR_FLOOR:
            raise ValueError(f"SNRs must be >= {SNR_FLOOR}, got ({self.snr_wm}, {self.snr_gm})")
        if not (self.sigma_x >= self.sigma_y >= 0.0):
            raise ValueError(f"need sigma_x >= sigma_y >= 0, got ({self.sigma_x}, {self.sigma_y})")

    def to_json(self) -> dict:
        return {
            "snr_wm": self.snr_wm,
            "snr_gm": self.snr_gm,
            "sigma_x": self.sigma_x,
            "sigma_y": self.sigma_y,
        }


@dataclass(frozen=True)
class Multipliers:
    """Low-field over high-field mean intensity ratios per tissue class."""

    l_wm: float
    l_gm: float
    l_oth: float = 1.0

    def __post_init__(self):
        if self.l_oth != 1.0:
            raise ValueError("the non-WM/GM multiplier is fixed to 1")
        if self.l_wm <= 0 or self.l_gm <= 0:
            raise ValueError(f"multipliers must be > 0, got ({self.l_wm}, {self.l_gm})")


@dataclass(frozen=True)
class SigmaPolicy:
    """How to turn a sampled SNR pair into absolute noise levels.

    The default convention pins the low-field WM mean to the high-field
    WM mean, giving sigma_x = mu_y_wm / snr_wm, and treats high-field
    noise as negligible (sigma_y = 0).
    """

    mode: str = "match_wm_mean"
    mu_y_wm: float | None = None
    sigma_x: float | None = None
    sigma_y: float = 0.0

    def noise_levels(self, snr_wm: float) -> tuple[float, float]:
        if self.mode == "match_wm_mean":
            if self.mu_y_wm is None:
                raise ValueError("match_wm_mean policy needs mu_y_wm")
            return self.mu_y_wm / snr_wm, 0.0
        if self.mode == "fixed":
            if self.sigma_x is None:
                raise ValueError("fixed policy needs sigma_x")
            return self.sigma_x, self.sigma_y
        raise ValueError(f"unknown sigma policy mode {self.mode!r}")

    @classmethod
    def match_wm_mean(cls, mu_y_wm: float) -> "SigmaPolicy":
        return cls(mode="match_wm_mean", mu_y_wm=mu_y_wm)

    @classmethod
    def fixed(cls, sigma_x: float, sigma_y: float = 0.0) -> "SigmaPolicy":
        return cls(mode="fixed", sigma_x=sigma_x, sigma_y=sigma_y)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _slice_kernel(sigma_mm: float, pitch_mm: float) -> np.ndarray:
    """Gaussian taps at input slice positions, truncated at +/- 4 sigma.

    Renormalized to unit sum so constants are preserved.
    """
    half = int(math.floor(_KERNEL_TRUNCATION * sigma_mm / pitch_mm))
    offsets = np.arange(-half, half + 1, dtype=float) * pitch_mm
    taps = np.exp(-(offsets**2) / (2.0 * sigma_mm**2))
    return taps / taps.sum()


def _blur_z(data: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Convolve each z-column with `taps`, renormalizing at the boundaries.

    Interior voxels see the full kernel; near the edges only in-range taps
    contribute and their weights are rescaled to sum to 1, which avoids
    edge dimming and keeps constant volumes constant.
    """
    nz = data.shape[2]
    half = (len(taps) - 1) // 2
    out = np.zeros_like(data, dtype=np.float64)
    weight = np.zeros(nz)
    for j, w in enumerate(taps):
        off = j - half
        src_lo, src_hi = max(0, off), min(nz, nz + off)
        dst_lo, dst_hi = max(0, -off), min(nz, nz - off)
        out[:, :, dst_lo:dst_hi] += w * data[:, :, src_lo:src_hi]
        weight[dst_lo:dst_hi] += w
    out /= weight
    return out


def blur_downsample_z(vol: Volume3D, r: int) -> Volume3D:
    """Blur along z with the low-field slice profile and decimate by r.

    The Gaussian FWHM equals the low-field slice thickness r * thickness;
    output slices sit at multiples of the low-field pitch r * (thickness +
    gap), which on the input grid is every r-th blurred slice. Output
    geometry scales thickness and gap by r.
    """
    if r < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {r}")
    nz = vol.dims[2]
    if r > nz:
        raise ValueError(f"downsampling factor {r} exceeds slice count {nz}")
    g = vol.geometry
    sigma = r * g.slice_thickness * _FWHM_TO_SIGMA
    taps = _slice_kernel(sigma, g.slice_pitch)
    blurred = _blur_z(np.asarray(vol.data, dtype=np.float64), taps)
    # Slice k of the output lies at k * D_r = k * r * pitch, i.e. exactly
    # input slice k*r; nearest-slice sampling is exact for integer r.
    nz_out = (nz - 1) // r + 1
    data = blurred[:, :, : nz_out * r : r].copy()
    geometry = Geometry(g.voxel_x, g.voxel_y, r * g.slice_thickness, r * g.slice_gap)
    return Volume3D(data=data, geometry=geometry)


def downsample_masks(masks: TissueMasks, r: int) -> TissueMasks:
    """Blur/decimate each tissue mask like the image, then renormalize.

    The per-voxel sum is 1 up to float error after blurring because the
    masks partition unity; renormalization restores it exactly.
    """
    wm = blur_downsample_z(masks.wm, r)
    gm = blur_downsample_z(masks.gm, r)
    oth = blur_downsample_z(masks.oth, r)
    total = wm.data + gm.data + oth.data
    total = np.where(total > 0, total, 1.0)
    wm_n = np.clip(wm.data / total, 0.0, 1.0)
    gm_n = np.clip(gm.data / total, 0.0, 1.0)
    return TissueMasks(
        wm=wm.with_data(wm_n),
        gm=gm.with_data(gm_n),
        oth=oth.with_data(np.clip(1.0 - wm_n - gm_n, 0.0, 1.0)),
    )


def tissue_mean(vol: Volume3D, mask: Volume3D) -> float:
    """Mask-weighted mean intensity."""
    if vol.dims != mask.dims:
        raise ShapeError("volume and mask dims differ", vol.dims, mask.dims)
    weight = float(np.sum(mask.data))
    if weight <= 0.0:
        raise EstimationError("mask has zero total weight")
    return float(np.sum(mask.data * vol.data) / weight)


def estimate_background_sigma(vol: Volume3D, region: np.ndarray | None = None, min_voxels: int = 1000) -> float:
    """Sample standard deviation over the background region.

    By default the region is the exactly-zero voxels of `vol` itself
    (valid for skull-stripped or phantom data, where it returns 0). For a
    noisy volume pass `region`, the background support known from the
    clean source.
    """
    if region is None:
        region = background_mask(vol)
    region = np.asarray(region, dtype=bool)
    if region.shape != vol.dims:
        raise ShapeError("background region dims differ from volume", vol.dims, region.shape)
    n = int(region.sum())
    if n < min_voxels:
        raise EstimationError(f"need >= {min_voxels} background voxels, found {n}")
    values = vol.data[region]
    return float(np.std(values, ddof=1))


def sample_contrast(
    dist: SNRDistribution,
    policy: SigmaPolicy,
    rng: np.random.Generator | int,
) -> ContrastSample:
    """Draw one (SNR_wm, SNR_gm) pair and derive noise levels.

    The pair is mean + L z with L the covariance square root and z two
    standard normal draws; both components are clamped to SNR_FLOOR.
    Deterministic given an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    factor = dist.factor()
    z = rng.standard_normal(2)
    snr = dist.mean_vector() + factor @ z
    snr = np.maximum(snr, SNR_FLOOR)
    sigma_x, sigma_y = policy.noise_levels(float(snr[0]))
    return ContrastSample(snr_wm=float(snr[0]), snr_gm=float(snr[1]), sigma_x=sigma_x, sigma_y=sigma_y)


def compute_multipliers(sample: ContrastSample, mu_y_wm: float, mu_y_gm: float) -> Multipliers:
    """Low-field mean signals from the SNR draw, as ratios to high field."""
    if mu_y_wm <= 0 or mu_y_gm <= 0:
        raise ValueError(f"high-field tissue means must be > 0, got ({mu_y_wm}, {mu_y_gm})")
    mu_x_wm = sample.snr_wm * sample.sigma_x
    mu_x_gm = sample.snr_gm * sample.sigma_x
    return Multipliers(l_wm=mu_x_wm / mu_y_wm, l_gm=mu_x_gm / mu_y_gm)


def simulate(
    vol: Volume3D,
    masks: TissueMasks,
    r: int,
    dist: SNRDistribution,
    sigma_policy: SigmaPolicy | None = None,
    rng_seed: int | np.random.Generator = 0,
) -> tuple[Volume3D, ContrastSample]:
    """Run the full forward model and return the low-field volume.

    Blur/decimate image and masks on the same grid, measure the
    downsampled tissue means, draw the low-field contrast, rescale WM/GM
    signal and add Gaussian noise of variance sigma_x^2 - sigma_y^2.
    The drawn sample is returned for reproducibility.
    """
    if masks.dims != vol.dims:
        raise ShapeError("masks do not match volume dims", vol.dims, masks.dims)
    down = blur_downsample_z(vol, r)
    dmasks = downsample_masks(masks, r)

    mus = {}
    for name, mask in (("wm", dmasks.wm), ("gm", dmasks.gm)):
        weight = float(np.sum(mask.data))
        # An absent tissue class contributes nothing to the output; its
        # multiplier is irrelevant, so pin the mean to keep ratios at 1.
        mus[name] = tissue_mean(down, mask) if weight > 0 else 1.0

    if sigma_policy is None:
        sigma_policy = SigmaPolicy.match_wm_mean(mus["wm"])
    elif sigma_policy.mode == "match_wm_mean" and sigma_policy.mu_y_wm is None:
        sigma_policy = SigmaPolicy.match_wm_mean(mus["wm"])

    if not isinstance(rng_seed, np.random.Generator):
        rng_seed = np.random.default_rng(rng_seed)
    sample = sample_contrast(dist, sigma_policy, rng_seed)
    mult = compute_multipliers(sample, mus["wm"], mus["gm"])

    scale = mult.l_wm * dmasks.wm.data + mult.l_gm * dmasks.gm.data + mult.l_oth * dmasks.oth.data
    data = down.data * scale

    noise_var = sample.sigma_x**2 - sample.sigma_y**2
    if noise_var > 0.0:
        data = data + rng_seed.normal(0.0, math.sqrt(noise_var), size=data.shape)

    return down.with_data(data), sample


def load_distribution(spec: str) -> SNRDistribution:
    """Resolve a contrast name (t1w/t2w/flair) or a JSON file path."""
    key = spec.lower()
    if key in DEFAULT_DISTRIBUTIONS:
        return DEFAULT_DISTRIBUTIONS[key]
    with open(spec) as fh:
        return SNRDistribution.from_json(json.load(fh))
