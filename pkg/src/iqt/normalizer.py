"""Intensity harmonisation.

Landmark-based histogram normalisation shared by the training and test
paths: percentile landmarks are averaged over the training set and each
image is mapped onto them by a piecewise linear transform of its own
landmarks. A per-slice correction for cross-talk intensity drop is also
provided.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError
from .volume import Volume3D, foreground_mask

DEFAULT_PERCENTILES = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)


@dataclass(frozen=True)
class LandmarkTable:
    """Percentile landmarks and the target intensities they map to.

    ``source_landmarks`` may be None, in which case the transform computes
    the source landmarks from the volume it is applied to; this is the
    normal fitted-table usage. An explicit source pins the map instead.
    """

    percentiles: tuple[float, ...]
    target_landmarks: tuple[float, ...]
    source_landmarks: tuple[float, ...] | None = None

    def __post_init__(self):
        p = np.asarray(self.percentiles, dtype=float)
        if len(p) < 2:
            raise ValueError("need at least two percentiles")
        if np.any(p <= 0.0) or np.any(p >= 100.0):
            raise ValueError(f"percentiles must lie in (0, 100), got {self.percentiles}")
        if np.any(np.diff(p) <= 0.0):
            raise ValueError(f"percentiles must be strictly ascending, got {self.percentiles}")
        for name in ("target_landmarks", "source_landmarks"):
            marks = getattr(self, name)
            if marks is None:
                continue
            if len(marks) != len(p):
                raise ValueError(f"{name} length {len(marks)} != {len(p)} percentiles")
            if np.any(np.diff(np.asarray(marks, dtype=float)) < 0.0):
                raise ValueError(f"{name} must be non-decreasing, got {marks}")

    def to_json(self) -> dict:
        doc = {"percentiles": list(self.percentiles), "target_landmarks": list(self.target_landmarks)}
        if self.source_landmarks is not None:
            doc["source_landmarks"] = list(self.source_landmarks)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "LandmarkTable":
        source = doc.get("source_landmarks")
        return cls(
            percentiles=tuple(doc["percentiles"]),
            target_landmarks=tuple(doc["target_landmarks"]),
            source_landmarks=None if source is None else tuple(source),
        )

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "LandmarkTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def compute_landmarks(vol: Volume3D, percentiles=DEFAULT_PERCENTILES, min_foreground: int = 100) -> np.ndarray:
    """Foreground intensity percentiles by linear interpolation."""
    p = np.asarray(percentiles, dtype=float)
    if len(p) < 2 or np.any(np.diff(p) <= 0.0) or np.any(p <= 0.0) or np.any(p >= 100.0):
        raise ValueError(f"percentiles must be strictly ascending within (0, 100), got {percentiles}")
    values = vol.data[foreground_mask(vol)]
    if values.size < min_foreground:
        raise EstimationError(f"need >= {min_foreground} foreground voxels, found {values.size}")
    return np.percentile(values, p, method="linear")


def fit_normalizer(volumes, percentiles=DEFAULT_PERCENTILES) -> LandmarkTable:
    """Average the landmarks of the given volumes into a target table."""
    volumes = list(volumes)
    if not volumes:
        raise ValueError("need at least one volume to fit a normalizer")
    marks = np.stack([compute_landmarks(v, percentiles) for v in volumes])
    return LandmarkTable(percentiles=tuple(percentiles), target_landmarks=tuple(marks.mean(axis=0)))


def _piecewise_map(values: np.ndarray, source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Monotone piecewise-linear map through (source_i -> target_i).

    Beyond the end landmarks the end segments extend linearly. A run of
    equal source landmarks maps inputs at that exact value to the midpoint
    of the run's targets; inputs on either side use the adjacent segments.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)

    # Collapse runs of equal source values, keeping the run's first and
    # last targets for the adjacent segments and the midpoint for ties.
    uniq, first = np.unique(source, return_index=True)
    last = np.searchsorted(source, uniq, side="right") - 1
    t_left = target[first]    # target entering the knot from below
    t_right = target[last]    # target leaving the knot upward
    t_at = np.where(first == last, target[first], 0.5 * (t_left + t_right))

    if len(uniq) == 1:
        return np.full_like(values, t_at[0], dtype=float)

    seg = np.clip(np.searchsorted(uniq, values, side="right"), 1, len(uniq) - 1)
    lo, hi = seg - 1, seg
    span = uniq[hi] - uniq[lo]
    frac = (values - uniq[lo]) / span
    out = t_right[lo] + frac * (t_left[hi] - t_right[lo])

    exact = np.searchsorted(uniq, values)
    hit = (exact < len(uniq)) & (uniq[np.minimum(exact, len(uniq) - 1)] == values)
    out = np.where(hit, t_at[np.minimum(exact, len(uniq) - 1)], out)
    return out


def apply_normalization(vol: Volume3D, table: LandmarkTable) -> Volume3D:
    """Map foreground intensities through the landmark transform.

    Background zeros are preserved exactly. With a fitted table (no
    explicit source) the volume's own landmarks are computed first, so
    output landmarks coincide with the targets at the percentile points.
    """
    if table.source_landmarks is not None:
        source = np.asarray(table.source_landmarks, dtype=float)
    else:
        source = compute_landmarks(vol, table.percentiles)
    target = np.asarray(table.target_landmarks, dtype=float)

    fg = foreground_mask(vol)
    out = np.zeros(vol.dims, dtype=np.float64)
    out[fg] = _piecewise_map(vol.data[fg].astype(np.float64), source, target)
    return vol.with_data(out)


def slice_intensity_correct(vol: Volume3D, reference_slice: int, min_foreground: int = 100) -> Volume3D:
    """Match each z-slice's foreground histogram to a reference slice.

    Corrects slice-to-slice intensity differences (cross-talk artifact) by
    monotone CDF matching; the reference slice is returned untouched and
    background zeros are preserved.
    """
    nz = vol.dims[2]
    if not 0 <= reference_slice < nz:
        raise ValueError(f"reference slice {reference_slice} outside [0, {nz})")
    ref = vol.data[:, :, reference_slice]
    ref_values = np.sort(ref[ref != 0.0].ravel())
    if ref_values.size < min_foreground:
        raise ValueError(f"reference slice needs >= {min_foreground} foreground voxels, found {ref_values.size}")
    ref_quantiles = np.linspace(0.0, 1.0, ref_values.size)

    out = vol.data.astype(np.float64).copy()
    for k in range(nz):
        if k == reference_slice:
            continue
        sl = out[:, :, k]
        fg = sl != 0.0
        values = sl[fg]
        if values.size == 0:
            continue
        uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
        if values.size == 1:
            quantiles = np.array([0.5])
        else:
            quantiles = (np.cumsum(counts) - 1.0) / (values.size - 1.0)
        matched = np.interp(quantiles, ref_quantiles, ref_values)
        sl[fg] = matched[inverse]
    return vol.with_data(out)
