"""Command-line surface tying the pipeline stages together.

Subcommands: phantom, simulate, fit-norm, train, enhance, evaluate,
selftest. Every run writes a JSON manifest beside its outputs recording
the resolved parameters, seeds and input/output digests, sufficient to
re-execute the run bit-identically in reference mode.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import FormatError
from .metrics import LabelVolume, psnr, rve, ssim
from .network import ModelSpec, enhance_volume, load_checkpoint, predict_with_uncertainty, save_checkpoint
from .normalizer import LandmarkTable, apply_normalization, fit_normalizer
from .patching import cubic_upsample_z
from .simulator import load_distribution, simulate
from .training import TrainConfig, history_to_csv, train
from .volume import Geometry, PhantomConfig, Volume3D, generate_phantom, read_nifti, write_nifti


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Manifest:
    """Collects parameters, digests and timings for one run."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.doc = {
            "tool": "iqt",
            "version": __version__,
            "command": command,
            "parameters": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
            "inputs": {},
            "outputs": {},
            "timings_s": {},
        }
        self._t0 = time.time()

    def add_input(self, path: str):
        if path and os.path.exists(path):
            self.doc["inputs"][path] = _sha256(path)

    def add_output(self, path: str):
        if path and os.path.exists(path):
            self.doc["outputs"][path] = _sha256(path)

    def write(self, anchor_path: str):
        self.doc["timings_s"]["total"] = round(time.time() - self._t0, 3)
        path = anchor_path + ".manifest.json"
        with open(path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_volume(path: str, slice_gap: float | None = None) -> Volume3D:
    vol, _ = read_nifti(path, slice_gap=slice_gap)
    return vol


def _phantom_config(args) -> PhantomConfig:
    if args.phantom_config:
        with open(args.phantom_config) as fh:
            return PhantomConfig.from_json(json.load(fh))
    dims = tuple(args.dims)
    return PhantomConfig(dims=dims, geometry=Geometry.isotropic(args.voxel), seed=args.seed)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    manifest = Manifest("phantom", args)
    os.makedirs(args.out, exist_ok=True)
    base_cfg = _phantom_config(args)
    from dataclasses import replace

    for i in range(args.n):
        cfg = replace(base_cfg, seed=base_cfg.seed + i)
        vol, masks = generate_phantom(cfg)
        stem = os.path.join(args.out, f"phantom_{i:03d}")
        write_nifti(vol, stem + ".nii")
        manifest.add_output(stem + ".nii")
        for name, mask in masks.as_dict().items():
            write_nifti(mask, f"{stem}_{name}.nii")
            manifest.add_output(f"{stem}_{name}.nii")
    manifest.write(os.path.join(args.out, "phantom"))
    return 0


def cmd_simulate(args) -> int:
    manifest = Manifest("simulate", args)
    vol = _load_volume(args.infile, args.slice_gap)
    mask_paths = args.masks.split(",")
    if len(mask_paths) != 3:
        raise ValueError("--masks needs three comma-separated paths: wm,gm,oth")
    from .volume import TissueMasks

    wm, gm, oth = (_load_volume(p) for p in mask_paths)
    masks = TissueMasks(wm=wm, gm=gm, oth=oth)
    dist = load_distribution(args.contrast)
    for path in [args.infile, *mask_paths]:
        manifest.add_input(path)

    lf, sample = simulate(vol, masks, args.r, dist, rng_seed=args.seed)
    write_nifti(lf, args.out)
    sample_path = args.out + ".contrast.json"
    with open(sample_path, "w") as fh:
        json.dump({"seed": args.seed, "r": args.r, "contrast": args.contrast, **sample.to_json()}, fh, indent=2)
        fh.write("\n")
    manifest.add_output(args.out)
    manifest.add_output(sample_path)
    manifest.write(args.out)
    return 0


def cmd_fit_norm(args) -> int:
    manifest = Manifest("fit-norm", args)
    volumes = []
    for path in args.infiles:
        manifest.add_input(path)
        volumes.append(_load_volume(path))
    table = fit_normalizer(volumes)
    table.save(args.save_norm)
    manifest.add_output(args.save_norm)
    manifest.write(args.save_norm)
    return 0


def cmd_train(args) -> int:
    manifest = Manifest("train", args)
    config_doc = {}
    if args.config:
        manifest.add_input(args.config)
        with open(args.config) as fh:
            config_doc = json.load(fh)

    def resolve(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return config_doc.get(key, default)

    config = TrainConfig(
        learning_rate=resolve(args.learning_rate, "learning_rate", 1e-3),
        decay=resolve(args.decay, "decay", 1e-6),
        batch_size=int(resolve(args.batch_size, "batch_size", 32)),
        epochs=int(resolve(args.epochs, "epochs", 100)),
        val_fraction=resolve(None, "val_fraction", 0.2),
        seed=int(resolve(args.seed, "seed", 0)),
    )
    spec = ModelSpec(
        r=args.r,
        levels=int(resolve(args.levels, "levels", 5)),
        base_filters=int(resolve(args.filters, "base_filters", 16)),
    )

    from .pipeline import build_training_set, make_subjects

    if args.phantoms:
        dist = load_distribution(args.contrast)
        cfg = PhantomConfig(dims=tuple(args.dims), seed=config.seed, modulation=0.04)
        subjects = make_subjects(args.phantoms, args.r, dist, cfg, seed=config.seed,
                                 fixed_contrast=args.fixed_contrast)
        patchsets, table = build_training_set(subjects, args.r, step=tuple(args.step) if args.step else None)
    else:
        if not args.data:
            raise ValueError("either --phantoms N or --data DIR is required")
        subjects = _load_subject_dir(args.data, manifest)
        dist = load_distribution(args.contrast)
        sims = []
        from .pipeline import Subject

        for index, (hf, masks) in enumerate(subjects):
            lf, _ = simulate(hf, masks, args.r, dist, rng_seed=config.seed + index)
            sims.append(Subject(index=index, hf=hf, masks=masks, lf=lf))
        patchsets, table = build_training_set(sims, args.r, step=tuple(args.step) if args.step else None)

    weights, history = train(spec, patchsets, config, verbose=args.verbose)
    save_checkpoint(args.out, spec, weights)
    table.save(args.out + ".norm.json")
    with open(args.out + ".history.csv", "w") as fh:
        fh.write(history_to_csv(history))
    manifest.add_output(args.out)
    manifest.add_output(args.out + ".norm.json")
    manifest.add_output(args.out + ".history.csv")
    manifest.write(args.out)
    return 0


def _load_subject_dir(directory: str, manifest: Manifest):
    """Subjects from a directory of <stem>.nii plus <stem>_{wm,gm,oth}.nii."""
    from .volume import TissueMasks

    subjects = []
    stems = sorted(
        f[:-4] for f in os.listdir(directory)
        if f.endswith(".nii") and not any(f.endswith(s + ".nii") for s in ("_wm", "_gm", "_oth"))
    )
    for stem in stems:
        base = os.path.join(directory, stem)
        vol = _load_volume(base + ".nii")
        masks = TissueMasks(
            wm=_load_volume(base + "_wm.nii"),
            gm=_load_volume(base + "_gm.nii"),
            oth=_load_volume(base + "_oth.nii"),
        )
        for suffix in ("", "_wm", "_gm", "_oth"):
            manifest.add_input(base + suffix + ".nii")
        subjects.append((vol, masks))
    if not subjects:
        raise FileNotFoundError(f"no subject volumes found under {directory}")
    return subjects


def cmd_enhance(args) -> int:
    manifest = Manifest("enhance", args)
    manifest.add_input(args.model)
    manifest.add_input(args.infile)
    spec, weights = load_checkpoint(args.model)
    vol = _load_volume(args.infile, args.slice_gap)
    table = None
    if args.norm:
        manifest.add_input(args.norm)
        table = LandmarkTable.load(args.norm)
    enhanced = enhance_volume(weights, spec, vol, table)
    write_nifti(enhanced, args.out)
    manifest.add_output(args.out)

    if args.uncertainty:
        if spec.masksembles is None:
            raise ValueError("model was built without masksembles; no uncertainty available")
        normed = apply_normalization(vol, table) if table is not None else vol
        from .patching import extract_pairs, blend_clip

        dummy = Volume3D(
            data=np.zeros((vol.dims[0], vol.dims[1], vol.dims[2] * spec.r), dtype=np.float32),
            geometry=vol.geometry,
        )
        pairs = extract_pairs(normed, dummy, spec.r, bg_threshold=1.0)
        var_patches = [
            predict_with_uncertainty(weights, spec, patch[None, None])[1]
            for patch in pairs.lf_patches
        ]
        var_data = blend_clip(var_patches, pairs.grid, domain="hf")
        write_nifti(Volume3D(data=np.ascontiguousarray(var_data), geometry=enhanced.geometry), args.uncertainty)
        manifest.add_output(args.uncertainty)
    manifest.write(args.out)
    return 0


def cmd_evaluate(args) -> int:
    manifest = Manifest("evaluate", args)
    manifest.add_input(args.est)
    manifest.add_input(args.ref)
    est = _load_volume(args.est)
    ref = _load_volume(args.ref)
    report = {
        "psnr_db": psnr(est, ref),
        "ssim": ssim(est, ref),
    }
    if report["psnr_db"] == float("inf"):
        report["psnr_db"] = "inf"
    if args.labels_est and args.labels_gold:
        manifest.add_input(args.labels_est)
        manifest.add_input(args.labels_gold)
        le, _ = read_nifti(args.labels_est)
        lg, _ = read_nifti(args.labels_gold)
        labels_est = LabelVolume(labels=np.rint(le.data).astype(np.int32), geometry=le.geometry)
        labels_gold = LabelVolume(labels=np.rint(lg.data).astype(np.int32), geometry=lg.geometry)
        structures = [int(s) for s in args.structures.split(",")] if args.structures else []
        report["rve"] = {str(s): rve(labels_est, labels_gold, s) for s in structures}
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output(args.out)
    manifest.write(args.out)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    os.makedirs(args.out, exist_ok=True)
    report = run_selftest(fast=args.fast)
    path = os.path.join(args.out, "selftest.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    failed = [name for name, entry in report["criteria"].items() if not entry["passed"]]
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iqt", description="Low-field MRI enhancement pipeline")
    parser.add_argument("--threads", type=int, default=1,
                        help="compute threads for stage-internal parallelism (default 1, reference mode)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic brain phantoms with tissue masks")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--voxel", type=float, default=1.0)
    p.add_argument("--phantom-config", default=None, help="JSON phantom configuration file")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="degrade a high-field volume to synthetic low field")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--masks", required=True, help="wm.nii,gm.nii,oth.nii")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--contrast", default="t1w", help="t1w|t2w|flair or a JSON distribution file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slice-gap", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-norm", help="fit the histogram normalizer over volumes")
    p.add_argument("--in", dest="infiles", nargs="+", required=True)
    p.add_argument("--save-norm", required=True)
    p.set_defaults(func=cmd_fit_norm)

    p = sub.add_parser("train", help="train the enhancement network")
    p.add_argument("--phantoms", type=int, default=None, help="desk-scale run on N synthetic phantoms")
    p.add_argument("--data", default=None, help="directory of high-field volumes with masks")
    p.add_argument("--contrast", default="t1w")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--config", default=None, help="training configuration JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--step", type=int, nargs=3, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--filters", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--decay", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fixed-contrast", action="store_true",
                   help="collapse the SNR distribution to its mean")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a low-field volume with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--norm", default=None)
    p.add_argument("--slice-gap", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--uncertainty", default=None, help="write the ensemble variance map here")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="PSNR/SSIM (and optional RVE) report")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--labels-est", default=None)
    p.add_argument("--labels-gold", default=None)
    p.add_argument("--structures", default=None, help="comma-separated structure ids")
    p.add_argument("--out", default="evaluation.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the acceptance suite")
    p.add_argument("--out", default="selftest_out")
    p.add_argument("--fast", action="store_true", help="skip the training criterion (several minutes)")
    p.set_defaults(func=cmd_selftest)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.threads is not None and args.threads > 0:
        try:
            import numba

            numba.set_num_threads(max(args.threads, 1))
        except (ImportError, ValueError):
            pass
    try:
        return args.func(args)
    except (ValueError, FormatError, FileNotFoundError, OSError) as exc:
        print(f"iqt {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
