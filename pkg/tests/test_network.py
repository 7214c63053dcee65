import numpy as np
import pytest

from iqt import (
    Geometry,
    MasksemblesSpec,
    ModelSpec,
    Volume3D,
    build_aniso_unet,
    enhance_volume,
    forward,
    load_checkpoint,
    predict_with_uncertainty,
    save_checkpoint,
)
from iqt.errors import CapabilityError, SpecError
from iqt.network import run_model
from iqt.autodiff import Graph, Tensor


def toy_spec(**kwargs):
    defaults = dict(r=4, levels=3, base_filters=4)
    defaults.update(kwargs)
    return ModelSpec(**defaults)


class TestModelSpec:
    def test_invalid_r(self):
        with pytest.raises(SpecError):
            ModelSpec(r=3)

    def test_too_few_levels_for_r(self):
        with pytest.raises(SpecError):
            ModelSpec(r=8, levels=3)  # needs 3 anisotropic stages

    def test_skip_upscales_multiply_to_r(self):
        for r in (2, 4, 8):
            spec = ModelSpec(r=r, levels=5, base_filters=4)
            per_stage = []
            for i in range(spec.n_anisotropic):
                per_stage.append(spec.skip_upscale(i) // spec.skip_upscale(i + 1))
            assert int(np.prod(per_stage)) == r

    def test_json_round_trip(self):
        spec = ModelSpec(r=4, levels=3, base_filters=8, masksembles=MasksemblesSpec(m=4, scale=2.0))
        assert ModelSpec.from_json(spec.to_json()) == spec


class TestShapes:
    @pytest.mark.parametrize("r", [2, 4, 8])
    def test_default_patch_shape(self, r):
        spec = ModelSpec(r=r, levels=5, base_filters=4)
        weights = build_aniso_unet(spec, seed=0)
        out = forward(weights, spec, np.zeros((1, 1, 32, 32, 32 // r), dtype=np.float32))
        assert out.shape == (1, 1, 32, 32, 32)

    def test_toy_shape(self):
        spec = toy_spec()
        weights = build_aniso_unet(spec, seed=0)
        out = forward(weights, spec, np.zeros((2, 1, 16, 16, 4), dtype=np.float32))
        assert out.shape == (2, 1, 16, 16, 16)

    def test_toy_parameter_count_audit(self):
        # layer-by-layer closed form for r=4, 3 levels, f0=4, 2 convs per
        # level, bottleneck depth 2, skip upscales u0=4, u1=2:
        #   residual block (in -> f): 2 convs 3^3 + BN pairs + 1x1 skip
        #   rb(i, f) = (f*i*27 + f) + (f*f*27 + f) + 2*(2f) + (f*i + f)
        def rb(i, f):
            return (f * i * 27 + f) + (f * f * 27 + f) + 4 * f + (f * i + f)

        #   bottleneck (f, half=f/2, z-factor u):
        #   in 1x1 (f->f) + 2 BN, mid0 3^3 (f->h), mid1 3^3 (h->h) each + BN,
        #   out 1x1 (h->f) + BN, up transpose (f->f, u taps) + BN,
        #   skip transpose (f->f, u taps)
        def bb(f, u):
            h = f // 2
            total = (f * f + f) + 2 * f          # endpoint in + BN
            total += (h * f * 27 + h) + 2 * h    # mid0 + BN
            total += (h * h * 27 + h) + 2 * h    # mid1 + BN
            total += (f * h + f) + 2 * f         # endpoint out + BN
            total += (f * f * u + f) + 2 * f     # transpose up + BN
            total += f * f * u + f               # transpose skip
            return total

        #   decoder trunk transpose (2,2,2): f_out*f_in*8 + f_out + BN pair
        def up(f_in, f_out):
            return f_out * f_in * 8 + f_out + 2 * f_out

        expected = (
            rb(1, 4) + rb(4, 8) + rb(8, 16)      # encoder levels
            + up(16, 8) + bb(8, 2) + rb(16, 8)   # decoder level 1
            + up(8, 4) + bb(4, 4) + rb(8, 4)     # decoder level 0
            + (4 + 1)                            # final 1x1x1 conv
        )
        weights = build_aniso_unet(toy_spec(), seed=0)
        total = sum(t.data.size for t in weights.trainable().values())
        assert total == expected

    def test_zero_final_layer_maps_to_zero(self):
        spec = toy_spec()
        weights = build_aniso_unet(spec, seed=0)
        weights.params["final.w"].data[...] = 0.0
        weights.params["final.b"].data[...] = 0.0
        rng = np.random.default_rng(0)
        out = forward(weights, spec, rng.normal(size=(1, 1, 16, 16, 4)).astype(np.float32))
        assert np.array_equal(out, np.zeros_like(out))

    def test_inference_deterministic(self):
        spec = toy_spec()
        weights = build_aniso_unet(spec, seed=1)
        x = np.random.default_rng(2).normal(size=(2, 1, 16, 16, 4)).astype(np.float32)
        assert np.array_equal(forward(weights, spec, x), forward(weights, spec, x))

    def test_incompatible_input_rejected(self):
        spec = toy_spec()
        weights = build_aniso_unet(spec, seed=0)
        with pytest.raises(SpecError):
            forward(weights, spec, np.zeros((1, 1, 10, 10, 4), dtype=np.float32))


class TestMasksembles:
    def test_mask_matrix_properties(self):
        ms = MasksemblesSpec(m=4, scale=2.0)
        masks = ms.build(16)
        assert masks.shape == (4, 16)
        assert set(np.unique(masks)) <= {0.0, 1.0}
        assert np.all(masks.sum(axis=1) == 8)  # round(16/2) active each
        assert np.all(masks.sum(axis=0) >= 1)  # every channel covered

    def test_insufficient_coverage_rejected(self):
        with pytest.raises(SpecError):
            MasksemblesSpec(m=2, scale=4.0).build(16)  # 2*4 < 16

    def test_m1_all_ones_reproduces_plain_net(self):
        plain = toy_spec()
        masked = toy_spec(masksembles=MasksemblesSpec(m=1, scale=1.0))
        w_plain = build_aniso_unet(plain, seed=3)
        w_masked = build_aniso_unet(masked, seed=3)
        x = np.random.default_rng(4).normal(size=(2, 1, 16, 16, 4)).astype(np.float32)
        assert np.array_equal(forward(w_plain, plain, x), forward(w_masked, masked, x))

    def test_masks_fixed_across_training_steps(self):
        from iqt import TrainConfig, extract_pairs, train

        spec = toy_spec(masksembles=MasksemblesSpec(m=2, scale=2.0))
        rng = np.random.default_rng(5)
        geom = Geometry.isotropic(1.0)
        patchsets = []
        for subject in range(3):
            lf = Volume3D(data=rng.uniform(0.5, 1.5, size=(16, 16, 4)), geometry=geom)
            hf = Volume3D(data=rng.uniform(0.5, 1.5, size=(16, 16, 16)), geometry=geom)
            ps = extract_pairs(lf, hf, 4, patch=(16, 16, 4), step=(16, 16, 4), bg_threshold=1.0, subject=subject)
            patchsets.append(ps)
        config = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=2, val_fraction=0.34, seed=0)
        weights, _ = train(spec, patchsets, config)
        fresh = build_aniso_unet(spec, seed=config.seed)
        for name, mask in fresh.masks.items():
            assert np.array_equal(weights.masks[name], mask)

    def test_variance_zero_for_identical_masks(self):
        spec = toy_spec(masksembles=MasksemblesSpec(m=4, scale=1.0))
        weights = build_aniso_unet(spec, seed=6)
        patch = np.random.default_rng(7).normal(size=(16, 16, 4)).astype(np.float32)
        mean, var = predict_with_uncertainty(weights, spec, patch)
        assert np.array_equal(var, np.zeros_like(var))
        assert mean.shape == (16, 16, 16)

    def test_two_member_closed_forms(self):
        spec = toy_spec(masksembles=MasksemblesSpec(m=2, scale=2.0))
        weights = build_aniso_unet(spec, seed=8)
        patch = np.random.default_rng(9).normal(size=(16, 16, 4)).astype(np.float32)
        mean, var = predict_with_uncertainty(weights, spec, patch)
        members = []
        for i in range(2):
            spec1 = toy_spec(masksembles=MasksemblesSpec(m=1, scale=2.0))
            w1 = weights.copy()
            w1.masks = {name: m[i : i + 1].copy() for name, m in weights.masks.items()}
            members.append(forward(w1, spec1, patch[None, None])[0, 0])
        a, b = members
        assert float(np.abs(a - b).max()) > 0
        assert np.array_equal(mean, (a + b) / 2.0)
        closed = ((a.astype(np.float64) - b.astype(np.float64)) / 2.0) ** 2
        assert np.allclose(var, closed, atol=1e-10)

    def test_variance_invariant_to_replication_order(self):
        spec = toy_spec(masksembles=MasksemblesSpec(m=4, scale=2.0))
        weights = build_aniso_unet(spec, seed=10)
        patch = np.random.default_rng(11).normal(size=(16, 16, 4)).astype(np.float32)
        _, var = predict_with_uncertainty(weights, spec, patch)
        assert np.all(var >= 0.0)
        # permuting which member runs first must not change the statistics:
        # evaluate members independently and pool in shuffled order
        outs = []
        for i in range(4):
            spec1 = toy_spec(masksembles=MasksemblesSpec(m=1, scale=2.0))
            w1 = weights.copy()
            w1.masks = {name: m[i : i + 1].copy() for name, m in weights.masks.items()}
            outs.append(forward(w1, spec1, patch[None, None])[0, 0].astype(np.float64))
        for perm in ([3, 1, 0, 2], [2, 3, 1, 0]):
            shuffled = np.stack([outs[i] for i in perm])
            assert np.allclose(shuffled.var(axis=0), var, atol=1e-10)

    def test_uncertainty_requires_masksembles(self):
        spec = toy_spec()
        weights = build_aniso_unet(spec, seed=0)
        with pytest.raises(CapabilityError):
            predict_with_uncertainty(weights, spec, np.zeros((16, 16, 4), dtype=np.float32))


class TestEnhanceVolume:
    def test_output_dims_and_geometry(self):
        spec = toy_spec()
        weights = build_aniso_unet(spec, seed=0)
        vol = Volume3D(
            data=np.random.default_rng(1).uniform(0.5, 1.0, size=(40, 40, 12)),
            geometry=Geometry(1.0, 1.0, 3.0, 1.0),
        )
        out = enhance_volume(weights, spec, vol)
        assert out.dims == (40, 40, 48)
        assert out.geometry.slice_pitch == pytest.approx(1.0)

    def test_stub_replication_network(self):
        # contrived weights reproducing z-replication: zero everything, then
        # turn the final conv into a pass-through of the bottleneck skip path
        # is intricate; instead check the plumbing with the zero network,
        # whose enhancement must be exactly zero everywhere
        spec = toy_spec()
        weights = build_aniso_unet(spec, seed=0)
        for name, tensor in weights.params.items():
            tensor.data[...] = 0.0
        vol = Volume3D(
            data=np.random.default_rng(2).uniform(0.5, 1.0, size=(32, 32, 8)),
            geometry=Geometry.isotropic(1.0),
        )
        out = enhance_volume(weights, spec, vol)
        assert out.dims == (32, 32, 32)
        assert np.array_equal(out.data, np.zeros_like(out.data))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = toy_spec(masksembles=MasksemblesSpec(m=2, scale=2.0))
        weights = build_aniso_unet(spec, seed=12)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, spec, weights)
        spec2, weights2 = load_checkpoint(path)
        assert spec2 == spec
        assert set(weights2.params) == set(weights.params)
        for name, tensor in weights.params.items():
            assert np.array_equal(weights2.params[name].data, tensor.data.astype(np.float32))
        for name, mask in weights.masks.items():
            assert np.array_equal(weights2.masks[name], mask)
        x = np.random.default_rng(13).normal(size=(2, 1, 16, 16, 4)).astype(np.float32)
        assert np.array_equal(forward(weights, spec, x), forward(weights2, spec2, x))

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 32)
        from iqt.errors import FormatError

        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestWholeModelGradient:
    # seeds chosen so every relu input and pooling window keeps a margin
    # from the kink; finite differences are meaningless across one
    @pytest.mark.parametrize("seed", [36, 39])
    def test_gradient_check_small_spec(self, seed):
        from iqt.autodiff import gradient_check, kink_margins

        spec = ModelSpec(r=4, levels=3, base_filters=2, convs_per_level=1, bottleneck_depth=1)
        rng = np.random.default_rng(1000 + seed)
        weights = build_aniso_unet(spec, seed=seed, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 1, 8, 8, 2)))
        y = Tensor(rng.normal(size=(2, 1, 8, 8, 8)))
        graph = Graph()
        graph.mutate_state = False
        out = run_model(spec, weights, graph, x, training=True)
        loss = graph.apply("mse", [out, y])
        assert min(kink_margins(graph)) > 1e-4
        # spot-check a representative subset of parameter tensors
        names = ["enc0.conv0.w", "enc2.skip.b", "skip0.up.w", "skip1.mid0.bn.gamma", "up1.w", "dec0.conv0.w", "final.w"]
        for name in names:
            assert gradient_check(graph, loss, weights.params[name]) < 1e-4
