"""Acceptance suite: one deterministic, self-contained check per criterion.

Each check returns {"passed": bool, "detail": str, ...measurements...}.
`run_selftest` executes them in order, printing one line per criterion;
the pytest acceptance module drives the same functions.
"""

from __future__ import annotations

import json
import math
import os
import tempfile

import numpy as np

from . import cli
from .autodiff import BatchNormState, Graph, Tensor, backward, gradient_check
from .metrics import psnr, rve, ssim, LabelVolume
from .network import (
    MasksemblesSpec,
    ModelSpec,
    build_aniso_unet,
    enhance_volume,
    forward,
    predict_with_uncertainty,
    run_model,
)
from .normalizer import apply_normalization, compute_landmarks, fit_normalizer
from .patching import blend_clip, cubic_upsample_z, extract_pairs
from .pipeline import build_training_set, make_subjects
from .simulator import (
    DEFAULT_DISTRIBUTIONS,
    SNRDistribution,
    SigmaPolicy,
    blur_downsample_z,
    downsample_masks,
    estimate_background_sigma,
    sample_contrast,
    simulate,
)
from .training import TrainConfig, train
from .volume import Geometry, PhantomConfig, TissueMasks, Volume3D, generate_phantom


def _result(passed: bool, detail: str, **extra) -> dict:
    out = {"passed": bool(passed), "detail": detail}
    out.update(extra)
    return out


def criterion_1_simulator_contrast_fidelity() -> dict:
    """20 degenerate-contrast simulations reproduce the sampled SNRs."""
    dist = SNRDistribution.degenerate((64.50, 54.14))
    worst_snr = 0.0
    worst_var = 0.0
    phantoms = [generate_phantom(PhantomConfig(dims=(72, 72, 64), seed=100 + i)) for i in range(4)]
    runs = 0
    for i, (hf, masks) in enumerate(phantoms):
        clean = blur_downsample_z(hf, 4)
        dm = downsample_masks(masks, 4)
        bg = clean.data == 0.0
        for j in range(5):
            lf, sample = simulate(hf, masks, 4, dist, rng_seed=1000 + 10 * i + j)
            sigma = estimate_background_sigma(lf, region=bg)
            for mask, target in ((dm.wm, sample.snr_wm), (dm.gm, sample.snr_gm)):
                measured = float(lf.data[mask.data > 0.5].mean()) / sigma
                worst_snr = max(worst_snr, abs(measured - target) / target)
            var = float(np.var(lf.data[bg], ddof=1))
            expect = sample.sigma_x**2 - sample.sigma_y**2
            worst_var = max(worst_var, abs(var - expect) / expect)
            runs += 1
    passed = worst_snr <= 0.05 and worst_var <= 0.10
    return _result(
        passed,
        f"{runs} simulations: worst SNR dev {worst_snr:.3%} (<=5%), worst background-variance dev {worst_var:.3%} (<=10%)",
        worst_snr_dev=worst_snr,
        worst_var_dev=worst_var,
    )


def criterion_2_simulator_identity() -> dict:
    """r=1, zero gap, all-other masks, equal noise: simulate == blur."""
    rng = np.random.default_rng(2)
    geom = Geometry.isotropic(1.0)
    vol = Volume3D(data=rng.uniform(1.0, 2.0, size=(16, 16, 16)), geometry=geom)
    zeros = Volume3D(data=np.zeros(vol.dims), geometry=geom)
    ones = Volume3D(data=np.ones(vol.dims), geometry=geom)
    masks = TissueMasks(wm=zeros, gm=zeros, oth=ones)
    out, _ = simulate(vol, masks, 1, SNRDistribution.degenerate((64.50, 54.14)),
                      SigmaPolicy.fixed(0.7, 0.7), rng_seed=0)
    blur = blur_downsample_z(vol, 1)
    exact = np.array_equal(out.data, blur.data)
    return _result(exact, f"bit-exact match: {exact}")


def criterion_3_distribution_sampling() -> dict:
    """1e5 draws per shipped distribution match mean and covariance."""
    details = []
    passed = True
    policy = SigmaPolicy.fixed(1.0)
    for name, dist in DEFAULT_DISTRIBUTIONS.items():
        rng = np.random.default_rng(hash(name) % (2**31))
        draws = np.empty((100_000, 2))
        for i in range(draws.shape[0]):
            s = sample_contrast(dist, policy, rng)
            draws[i] = (s.snr_wm, s.snr_gm)
        mean_dev = float(np.max(np.abs(draws.mean(axis=0) - dist.mean_vector()) / dist.mean_vector()))
        cov = np.cov(draws.T)
        frob = float(np.linalg.norm(cov - dist.cov_matrix()) / np.linalg.norm(dist.cov_matrix()))
        ok = mean_dev <= 0.01 and frob <= 0.05
        passed = passed and ok
        details.append(f"{name}: mean dev {mean_dev:.3%}, cov Frobenius dev {frob:.3%}")
    return _result(passed, "; ".join(details))


def criterion_4_patch_round_trip() -> dict:
    """extract -> blend is a bit-exact identity; counts match the grid."""
    geom = Geometry.isotropic(1.0)
    passed = True
    checks = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for r in (2, 4, 8):
            dims = (int(rng.integers(33, 72)), int(rng.integers(33, 72)), int(rng.integers(32 // r, 40)))
            lf = Volume3D(data=rng.uniform(0.5, 1.5, size=dims), geometry=geom)
            hf = Volume3D(data=rng.uniform(0.5, 1.5, size=(dims[0], dims[1], dims[2] * r)), geometry=geom)
            ps = extract_pairs(lf, hf, r, bg_threshold=1.0)
            passed = passed and np.array_equal(blend_clip(ps.lf_patches, ps.grid, "lf"), lf.data)
            passed = passed and np.array_equal(blend_clip(ps.hf_patches, ps.grid, "hf"), hf.data)
            checks += 1
    lf = Volume3D(data=np.ones((64, 64, 16)), geometry=geom)
    hf = Volume3D(data=np.ones((64, 64, 64)), geometry=geom)
    ps = extract_pairs(lf, hf, 4, patch=(32, 32, 8), step=(16, 16, 4), bg_threshold=1.0)
    count_ok = len(ps) == 27 and ps.grid.counts == (3, 3, 3)
    passed = passed and count_ok
    return _result(passed, f"{checks} round trips bit-exact; 64^3 grid count 27: {count_ok}")


def _op_gradient_fixture(kind, rng, graph):
    if kind == "conv3":
        x = Tensor(rng.normal(size=(2, 3, 4, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 3, 3, 3)) * 0.4, requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 1, 1, 1)), requires_grad=True)
        return [x, w, b], graph.apply("conv3", [x, w, b])
    if kind == "conv1":
        x = Tensor(rng.normal(size=(2, 3, 3, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 1, 1, 1)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4, 1, 1, 1)), requires_grad=True)
        return [x, w, b], graph.apply("conv1", [x, w, b])
    if kind == "convtranspose":
        x = Tensor(rng.normal(size=(2, 3, 2, 2, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 1, 1, 1)), requires_grad=True)
        return [x, w, b], graph.apply("convtranspose", [x, w, b], {"factor": (2, 2, 2)})
    if kind == "convtranspose_z":
        x = Tensor(rng.normal(size=(2, 3, 3, 3, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 1, 1, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 1, 1, 1)), requires_grad=True)
        return [x, w, b], graph.apply("convtranspose_z", [x, w, b], {"u": 4})
    if kind == "maxpool":
        values = rng.permutation(np.arange(128, dtype=float)) * 0.1
        x = Tensor(values.reshape(2, 2, 4, 4, 2), requires_grad=True)
        return [x], graph.apply("maxpool", [x], {"window": (2, 2, 2)})
    if kind == "relu":
        x = Tensor(rng.normal(size=(2, 2, 3, 3, 3)) + 0.1, requires_grad=True)
        return [x], graph.apply("relu", [x])
    if kind == "batchnorm":
        x = Tensor(rng.normal(size=(2, 3, 3, 3, 3)), requires_grad=True)
        gamma = Tensor(rng.normal(size=(1, 3, 1, 1, 1)), requires_grad=True)
        beta = Tensor(rng.normal(size=(1, 3, 1, 1, 1)), requires_grad=True)
        out = graph.apply("batchnorm", [x, gamma, beta], {"state": BatchNormState(3), "training": True})
        return [x, gamma, beta], out
    if kind == "concat_channels":
        a = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 2, 2, 2)), requires_grad=True)
        return [a, b], graph.apply("concat_channels", [a, b])
    if kind == "add":
        a = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), requires_grad=True)
        return [a, b], graph.apply("add", [a, b])
    if kind == "mse":
        a = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), requires_grad=True)
        return [a, b], graph.apply("mse", [a, b])
    if kind == "masksemble_mask":
        x = Tensor(rng.normal(size=(2, 4, 2, 2, 2)), requires_grad=True)
        masks = np.array([[1, 0, 1, 1], [0, 1, 1, 0]], dtype=float)
        return [x], graph.apply("masksemble_mask", [x], {"masks": masks})
    raise AssertionError(kind)


def criterion_5_gradient_correctness() -> dict:
    """Finite differences confirm every op and the whole toy network."""
    from .autodiff import OP_KINDS

    worst_op = 0.0
    for kind in OP_KINDS:
        for seed in range(5):
            rng = np.random.default_rng(seed)
            graph = Graph()
            tensors, out = _op_gradient_fixture(kind, rng, graph)
            loss = out if kind == "mse" else graph.apply("mse", [out, Tensor(rng.normal(size=out.shape))])
            for t in tensors:
                worst_op = max(worst_op, gradient_check(graph, loss, t))

    # Finite differencing is only valid away from relu/maxpool kinks, so the
    # whole-model fixtures pin seeds whose activations keep a safe margin
    # from the non-smooth points (see kink_margins).
    from .autodiff import kink_margins

    spec = ModelSpec(r=4, levels=3, base_filters=2, convs_per_level=1, bottleneck_depth=1)
    worst_model = 0.0
    for seed in (36, 39, 32, 24, 35):
        rng = np.random.default_rng(1000 + seed)
        weights = build_aniso_unet(spec, seed=seed, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 1, 8, 8, 2)))
        y = Tensor(rng.normal(size=(2, 1, 8, 8, 8)))
        graph = Graph()
        graph.mutate_state = False
        out = run_model(spec, weights, graph, x, training=True)
        loss = graph.apply("mse", [out, y])
        relu_margin, pool_margin = kink_margins(graph)
        assert min(relu_margin, pool_margin) > 1e-4, "fixture sits too close to a relu/pool kink"
        for t in weights.trainable().values():
            worst_model = max(worst_model, gradient_check(graph, loss, t))

    passed = worst_op <= 1e-5 and worst_model <= 1e-4
    return _result(
        passed,
        f"worst per-op rel err {worst_op:.2e} (<=1e-5), worst whole-model rel err {worst_model:.2e} (<=1e-4)",
        worst_op=worst_op,
        worst_model=worst_model,
    )


def criterion_6_shape_contract() -> dict:
    """32x32x(32/r) -> 32x32x32 and enhance emits exactly r x slices."""
    passed = True
    details = []
    for r in (2, 4, 8):
        spec = ModelSpec(r=r, levels=5, base_filters=4)
        weights = build_aniso_unet(spec, seed=0)
        out = forward(weights, spec, np.zeros((1, 1, 32, 32, 32 // r), dtype=np.float32))
        ok = out.shape == (1, 1, 32, 32, 32)
        passed = passed and ok
        details.append(f"r={r}: {(32, 32, 32 // r)} -> {out.shape[2:]}")

    spec = ModelSpec(r=4, levels=3, base_filters=4)
    weights = build_aniso_unet(spec, seed=0)
    vol = Volume3D(data=np.random.default_rng(0).uniform(0.5, 1.0, size=(40, 40, 12)),
                   geometry=Geometry(1.0, 1.0, 4.0, 0.0))
    enhanced = enhance_volume(weights, spec, vol)
    ok = enhanced.dims == (40, 40, 48) and enhanced.geometry.slice_pitch == 1.0
    passed = passed and ok
    details.append(f"enhance (40,40,12) -> {enhanced.dims}")
    return _result(passed, "; ".join(details))


def criterion_7_learning_beats_baseline(verbose: bool = False) -> dict:
    """Toy network trained on phantom patches outperforms cubic interpolation."""
    dist = DEFAULT_DISTRIBUTIONS["t1w"]
    cfg = PhantomConfig(dims=(64, 64, 64), modulation=0.04)
    subjects = make_subjects(6, 4, dist, cfg, seed=42, fixed_contrast=True)
    patchsets, table = build_training_set(subjects, 4, step=(16, 16, 2))
    n_train_patches = sum(len(p) for p in patchsets)

    spec = ModelSpec(r=4, levels=3, base_filters=4)
    config = TrainConfig(learning_rate=1e-2, decay=1e-2, batch_size=8, epochs=22, val_fraction=0.2, seed=1)
    weights, history = train(spec, patchsets, config, verbose=verbose)

    test = make_subjects(1, 4, dist, cfg, seed=777, fixed_contrast=True)[0]
    enhanced = enhance_volume(weights, spec, test.lf, table)
    cubic = cubic_upsample_z(test.lf, 4)
    ref = test.hf.with_data(test.hf.data.astype(np.float64))
    enh = enhanced.with_data(enhanced.data.astype(np.float64))
    cub = cubic.with_data(cubic.data.astype(np.float64))

    psnr_net, psnr_cubic = psnr(enh, ref), psnr(cub, ref)
    ssim_net, ssim_cubic = ssim(enh, ref), ssim(cub, ref)
    best_val = min(h.val_mse for h in history)
    conv_ratio = best_val / history[0].val_mse
    passed = (
        n_train_patches >= 200
        and psnr_net >= psnr_cubic + 1.0
        and ssim_net > ssim_cubic
        and conv_ratio <= 0.5
    )
    return _result(
        passed,
        f"{n_train_patches} patches; PSNR net {psnr_net:.2f} dB vs cubic {psnr_cubic:.2f} dB "
        f"(need >= +1); SSIM {ssim_net:.3f} vs {ssim_cubic:.3f}; best/epoch-1 val MSE {conv_ratio:.3f} (<=0.5)",
        psnr_net=psnr_net,
        psnr_cubic=psnr_cubic,
        ssim_net=ssim_net,
        ssim_cubic=ssim_cubic,
        val_ratio=conv_ratio,
    )


def criterion_8_normalization() -> dict:
    """Fitted tables hit targets at landmarks; idempotent; monotone."""
    rng = np.random.default_rng(8)
    geom = Geometry.isotropic(1.0)

    def packed(values, shape=(30, 30, 30)):
        data = np.zeros(shape)
        data.reshape(-1)[: len(values)] = values
        return Volume3D(data=data, geometry=geom)

    # foreground sizes with (n-1) % 100 == 0 put percentiles on order stats
    vols = [packed(rng.uniform(5 * (i + 1), 90 * (i + 1), size=20001)) for i in range(3)]
    table = fit_normalizer(vols)
    exact = True
    for vol in vols:
        out = apply_normalization(vol, table)
        exact = exact and np.array_equal(compute_landmarks(out), np.asarray(table.target_landmarks))

    once = apply_normalization(vols[0], table)
    twice = apply_normalization(once, table)
    idempotent_dev = float(np.max(np.abs(twice.data - once.data)))

    probes = np.sort(rng.uniform(0.1, 600.0, size=10_000))
    mapped = apply_normalization(packed(probes, shape=(22, 22, 22)), table).data.reshape(-1)[: len(probes)]
    monotone = bool(np.all(np.diff(mapped) >= -1e-9))

    passed = exact and idempotent_dev <= 1e-6 and monotone
    return _result(
        passed,
        f"landmarks exact: {exact}; idempotence dev {idempotent_dev:.2e} (<=1e-6); monotone over 10^4 pairs: {monotone}",
    )


def criterion_9_uncertainty_degeneracy() -> dict:
    """s=1 masks give exactly zero variance; m=2 matches two-sample forms."""
    rng = np.random.default_rng(9)
    patch = rng.normal(size=(16, 16, 4)).astype(np.float32)

    spec_s1 = ModelSpec(r=4, levels=3, base_filters=4, masksembles=MasksemblesSpec(m=4, scale=1.0))
    weights_s1 = build_aniso_unet(spec_s1, seed=2)
    _, var = predict_with_uncertainty(weights_s1, spec_s1, patch)
    zero_var = float(np.abs(var).max()) == 0.0

    spec_m2 = ModelSpec(r=4, levels=3, base_filters=4, masksembles=MasksemblesSpec(m=2, scale=2.0))
    weights_m2 = build_aniso_unet(spec_m2, seed=3)
    mean, var = predict_with_uncertainty(weights_m2, spec_m2, patch)
    # independent route: run each member as a single-mask model
    members = []
    for i in range(2):
        spec_m1 = ModelSpec(r=4, levels=3, base_filters=4, masksembles=MasksemblesSpec(m=1, scale=2.0))
        w1 = weights_m2.copy()
        w1.masks = {name: m[i : i + 1].copy() for name, m in weights_m2.masks.items()}
        members.append(forward(w1, spec_m1, patch[None, None])[0, 0])
    a, b = members
    mean_exact = np.array_equal(mean, (a + b) / 2.0)
    var_closed = ((a.astype(np.float64) - b.astype(np.float64)) / 2.0) ** 2
    var_dev = float(np.max(np.abs(var.astype(np.float64) - var_closed)))
    divergent = float(np.abs(a - b).max()) > 0
    var_ok = var_dev <= 1e-10 * max(1.0, float(np.abs(var_closed).max()))

    passed = zero_var and mean_exact and var_ok and divergent
    return _result(
        passed,
        f"s=1 variance all-zero: {zero_var}; m=2 mean exact: {mean_exact}; "
        f"variance dev from ((a-b)/2)^2: {var_dev:.2e}; members divergent: {divergent}",
    )


def criterion_10_metric_oracles() -> dict:
    """PSNR/SSIM match naive oracles; RVE reproduces the closed form."""
    rng = np.random.default_rng(10)
    geom = Geometry.isotropic(1.0)
    est = Volume3D(data=rng.uniform(0, 50, size=(16, 16, 16)), geometry=geom)
    ref = Volume3D(data=rng.uniform(0, 50, size=(16, 16, 16)), geometry=geom)

    mse = 0.0
    for i in range(16):
        for j in range(16):
            for k in range(16):
                mse += (est.data[i, j, k] - ref.data[i, j, k]) ** 2
    mse /= 16**3
    psnr_oracle = 10.0 * math.log10(ref.data.max() ** 2 / mse)
    psnr_dev = abs(psnr(est, ref) - psnr_oracle)

    from .metrics import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW

    half = SSIM_WINDOW // 2
    taps = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2 * SSIM_SIGMA**2))
    taps /= taps.sum()
    window = taps[:, None, None] * taps[None, :, None] * taps[None, None, :]
    L = ref.data.max() - ref.data.min()
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    values = []
    for cx in range(half, 16 - half):
        for cy in range(half, 16 - half):
            for cz in range(half, 16 - half):
                wx = est.data[cx - half : cx + half + 1, cy - half : cy + half + 1, cz - half : cz + half + 1]
                wy = ref.data[cx - half : cx + half + 1, cy - half : cy + half + 1, cz - half : cz + half + 1]
                mx, my = np.sum(window * wx), np.sum(window * wy)
                vx = np.sum(window * wx * wx) - mx * mx
                vy = np.sum(window * wy * wy) - my * my
                cov = np.sum(window * wx * wy) - mx * my
                values.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    ssim_dev = abs(ssim(est, ref) - float(np.mean(values)))

    def labels(count):
        data = np.zeros(1000, dtype=np.int32)
        data[:count] = 1
        return LabelVolume(labels=data.reshape(10, 10, 10), geometry=geom)

    rve_mid = rve(labels(150), labels(100), 1)
    rve_zero = rve(labels(120), labels(120), 1)
    rve_max = rve(labels(0), labels(50), 1)
    rve_ok = abs(rve_mid - 0.4) < 1e-12 and rve_zero == 0.0 and rve_max == 2.0

    passed = psnr_dev <= 1e-9 and ssim_dev <= 1e-6 and rve_ok
    return _result(
        passed,
        f"PSNR dev {psnr_dev:.2e} dB (<=1e-9); SSIM dev {ssim_dev:.2e} (<=1e-6); RVE closed forms: {rve_ok}",
    )


def criterion_11_determinism() -> dict:
    """Seeded subcommands produce bit-identical outputs across two runs."""

    def run_all(root: str) -> dict[str, bytes]:
        outputs = {}
        phantoms = os.path.join(root, "phantoms")
        assert cli.run(["phantom", "--n", "3", "--seed", "7", "--out", phantoms,
                        "--dims", "32", "32", "32"]) == 0
        lf_path = os.path.join(root, "lf.nii")
        assert cli.run(["simulate", "--in", os.path.join(phantoms, "phantom_000.nii"),
                        "--masks", ",".join(os.path.join(phantoms, f"phantom_000_{t}.nii") for t in ("wm", "gm", "oth")),
                        "--r", "4", "--contrast", "t1w", "--seed", "3", "--out", lf_path]) == 0
        norm_path = os.path.join(root, "norm.json")
        assert cli.run(["fit-norm", "--in", lf_path, "--save-norm", norm_path]) == 0
        model_path = os.path.join(root, "model.ckpt")
        assert cli.run(["train", "--phantoms", "3", "--r", "4", "--out", model_path,
                        "--dims", "32", "32", "32", "--levels", "3", "--filters", "2",
                        "--epochs", "2", "--batch-size", "4", "--seed", "5",
                        "--fixed-contrast"]) == 0
        enhanced_path = os.path.join(root, "enhanced.nii")
        assert cli.run(["enhance", "--model", model_path, "--in", lf_path,
                        "--norm", model_path + ".norm.json", "--out", enhanced_path]) == 0
        report_path = os.path.join(root, "eval.json")
        assert cli.run(["evaluate", "--est", enhanced_path, "--ref", os.path.join(phantoms, "phantom_000.nii"),
                        "--out", report_path]) == 0
        for dirpath, _, files in os.walk(root):
            for name in files:
                if name.endswith(".manifest.json"):
                    continue  # manifests carry timings
                path = os.path.join(dirpath, name)
                with open(path, "rb") as fh:
                    outputs[os.path.relpath(path, root)] = fh.read()
        return outputs

    with tempfile.TemporaryDirectory() as tmp:
        first = run_all(os.path.join(tmp, "a"))
        second = run_all(os.path.join(tmp, "b"))
    same_names = set(first) == set(second)
    diffs = [name for name in first if same_names and first[name] != second.get(name)]
    passed = same_names and not diffs
    return _result(passed, f"{len(first)} output files compared; mismatches: {diffs or 'none'}")


CRITERIA = [
    ("1 simulator contrast fidelity", criterion_1_simulator_contrast_fidelity),
    ("2 simulator identity", criterion_2_simulator_identity),
    ("3 distribution sampling", criterion_3_distribution_sampling),
    ("4 patch pipeline round trip", criterion_4_patch_round_trip),
    ("5 gradient correctness", criterion_5_gradient_correctness),
    ("6 shape contract", criterion_6_shape_contract),
    ("7 learning beats baseline", criterion_7_learning_beats_baseline),
    ("8 normalization", criterion_8_normalization),
    ("9 uncertainty degeneracy", criterion_9_uncertainty_degeneracy),
    ("10 metric oracles", criterion_10_metric_oracles),
    ("11 determinism", criterion_11_determinism),
]


def run_selftest(fast: bool = False) -> dict:
    report = {"criteria": {}}
    for name, check in CRITERIA:
        if fast and check is criterion_7_learning_beats_baseline:
            print(f"criterion {name}: SKIPPED (fast mode)", flush=True)
            continue
        entry = check()
        report["criteria"][name] = entry
        status = "PASS" if entry["passed"] else "FAIL"
        print(f"criterion {name}: {status} ({entry['detail']})", flush=True)
    return report
