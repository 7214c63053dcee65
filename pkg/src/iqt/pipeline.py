"""End-to-end glue: phantom cohorts, simulated training sets, evaluation.

Desk-scale reproduction of the full loop without clinical data: generate
phantoms, degrade them with the stochastic simulator, fit the histogram
normalizer on the synthetic low-field set, extract patch pairs per
subject, train, and score enhanced volumes against the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .normalizer import LandmarkTable, apply_normalization, fit_normalizer
from .patching import PatchSet, extract_pairs
from .simulator import SNRDistribution, SigmaPolicy, simulate
from .volume import PhantomConfig, TissueMasks, Volume3D, generate_phantom


@dataclass(frozen=True)
class Subject:
    """One phantom subject with its simulated low-field counterpart."""

    index: int
    hf: Volume3D
    masks: TissueMasks
    lf: Volume3D


def make_subjects(
    n: int,
    r: int,
    dist: SNRDistribution,
    phantom_cfg: PhantomConfig,
    seed: int = 0,
    fixed_contrast: bool = False,
    sigma_policy: SigmaPolicy | None = None,
) -> list[Subject]:
    """Generate n phantoms and simulate a low-field image for each.

    With ``fixed_contrast`` the distribution collapses to its mean, so
    every subject shares one contrast; otherwise each subject draws its
    own from ``dist``.
    """
    if fixed_contrast:
        dist = SNRDistribution.degenerate(dist.mean)
    root = np.random.SeedSequence(seed)
    subjects = []
    for index, child in enumerate(root.spawn(n)):
        sub_seeds = child.generate_state(2)
        cfg = replace(phantom_cfg, seed=int(sub_seeds[0]) % (2**31))
        hf, masks = generate_phantom(cfg)
        lf, _ = simulate(hf, masks, r, dist, sigma_policy, rng_seed=int(sub_seeds[1]) % (2**31))
        subjects.append(Subject(index=index, hf=hf, masks=masks, lf=lf))
    return subjects


def build_training_set(
    subjects: list[Subject],
    r: int,
    step: tuple[int, int, int] | None = None,
    bg_threshold: float = 0.8,
) -> tuple[list[PatchSet], LandmarkTable]:
    """Fit the normalizer on the low-field set and cut per-subject pairs."""
    table = fit_normalizer([s.lf for s in subjects])
    patchsets = []
    for s in subjects:
        lf_norm = apply_normalization(s.lf, table)
        patchsets.append(extract_pairs(lf_norm, s.hf, r, step=step, bg_threshold=bg_threshold, subject=s.index))
    return patchsets, table
