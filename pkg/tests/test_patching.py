import numpy as np
import pytest

from iqt import (
    Geometry,
    PatchGrid,
    Volume3D,
    blend_clip,
    cubic_upsample_z,
    extract_pairs,
    load_patchset,
    save_patchset,
)
from iqt.errors import ShapeError

from conftest import random_volume


class TestExtractPairs:
    def test_grid_count_64_cube(self):
        lf = random_volume((64, 64, 16), seed=1)
        hf = random_volume((64, 64, 64), seed=2)
        ps = extract_pairs(lf, hf, 4, patch=(32, 32, 8), step=(16, 16, 4), bg_threshold=1.0)
        # per axis: (64-32)/16+1 = 3 in-plane, (16-8)/4+1 = 3 in z
        assert ps.grid.counts == (3, 3, 3)
        assert len(ps) == 27

    def test_all_zero_volume_fully_excluded(self, unit_geometry):
        lf = Volume3D(data=np.zeros((64, 64, 16)), geometry=unit_geometry)
        hf = Volume3D(data=np.zeros((64, 64, 64)), geometry=unit_geometry)
        ps = extract_pairs(lf, hf, 4)
        assert len(ps) == 0

    def test_threshold_one_disables_exclusion(self, unit_geometry):
        lf = Volume3D(data=np.zeros((64, 64, 16)), geometry=unit_geometry)
        hf = Volume3D(data=np.zeros((64, 64, 64)), geometry=unit_geometry)
        ps = extract_pairs(lf, hf, 4, bg_threshold=1.0)
        assert len(ps) == ps.grid.n_positions

    def test_background_rule_boundary(self, unit_geometry):
        # patch exactly at the threshold is kept (rule is strict >)
        lf_data = np.zeros((32, 32, 8))
        lf_data.reshape(-1)[: lf_data.size // 2] = 1.0  # exactly 50% zeros
        lf = Volume3D(data=lf_data, geometry=unit_geometry)
        hf = random_volume((32, 32, 32), seed=3)
        assert len(extract_pairs(lf, hf, 4, bg_threshold=0.5)) == 1
        assert len(extract_pairs(lf, hf, 4, bg_threshold=0.4999)) == 0

    def test_incompatible_dims(self):
        lf = random_volume((32, 32, 8))
        hf = random_volume((32, 32, 30))
        with pytest.raises(ShapeError):
            extract_pairs(lf, hf, 4)


class TestBlendClip:
    @pytest.mark.parametrize("r", [2, 4, 8])
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_round_trip_identity(self, r, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(rng.integers(33, 70, size=2)) + (int(rng.integers(32 // r, 20 + 32 // r)),)
        lf = random_volume(dims, seed=seed + 10)
        hf = random_volume((dims[0], dims[1], dims[2] * r), seed=seed + 20)
        ps = extract_pairs(lf, hf, r, bg_threshold=1.0)
        assert np.array_equal(blend_clip(ps.lf_patches, ps.grid, "lf"), lf.data)
        assert np.array_equal(blend_clip(ps.hf_patches, ps.grid, "hf"), hf.data)

    def test_single_patch_grid(self, unit_geometry):
        lf = random_volume((20, 20, 6), seed=5)
        hf = random_volume((20, 20, 12), seed=6)
        ps = extract_pairs(lf, hf, 2, bg_threshold=1.0)
        assert ps.grid.n_positions == 1
        assert np.array_equal(blend_clip(ps.hf_patches, ps.grid, "hf"), hf.data)

    def test_overlap_midline_step(self):
        grid = PatchGrid(lf_dims=(48, 32, 8), patch=(32, 32, 8), step=(16, 16, 8), r=1)
        left = np.zeros((32, 32, 8))
        right = np.ones((32, 32, 8))
        out = blend_clip([left, right], grid, domain="lf")
        column = out[:, 0, 0]
        # overlap spans [16, 32); the cut sits at its midline, voxel 24,
        # with the tie going to the later patch
        assert np.all(column[:24] == 0.0)
        assert np.all(column[24:] == 1.0)

    def test_ownership_partition(self):
        # blending patch-index-constant patches shows each voxel owned once
        grid = PatchGrid(lf_dims=(64, 48, 12), patch=(32, 32, 8), step=(16, 16, 4), r=1)
        patches = [np.full((32, 32, 8), float(i)) for i in range(grid.n_positions)]
        out = blend_clip(patches, grid, domain="lf")
        owners, counts = np.unique(out, return_counts=True)
        assert counts.sum() == np.prod(grid.lf_dims)
        assert set(owners).issubset(set(float(i) for i in range(grid.n_positions)))

    def test_missing_patch_rejected(self):
        grid = PatchGrid(lf_dims=(48, 32, 8), patch=(32, 32, 8), step=(16, 16, 8), r=1)
        with pytest.raises(ValueError):
            blend_clip([np.zeros((32, 32, 8))], grid, domain="lf")


class TestCubicUpsample:
    def test_constant(self, unit_geometry):
        vol = Volume3D(data=np.full((5, 5, 6), 4.5), geometry=unit_geometry)
        out = cubic_upsample_z(vol, 4)
        assert out.dims == (5, 5, 24)
        assert np.allclose(out.data, 4.5, atol=1e-9)

    def test_linear_ramp(self, unit_geometry):
        data = np.broadcast_to(np.arange(10.0), (4, 4, 10)).copy()
        out = cubic_upsample_z(Volume3D(data=data, geometry=unit_geometry), 4)
        expect = np.arange(40) / 4.0
        assert np.allclose(out.data[2, 2], expect, atol=1e-9)

    def test_matches_direct_bspline_oracle(self, unit_geometry):
        # independent oracle: solve the not-a-knot collocation system with a
        # hand-rolled De Boor basis evaluation, then evaluate at the query
        # points directly
        rng = np.random.default_rng(8)
        column = rng.uniform(-3, 3, size=8)
        r = 2

        def bspline_basis(knots, degree, i, x):
            if degree == 0:
                last = knots[i + 1] == knots[-1]
                if (knots[i] <= x < knots[i + 1]) or (last and x == knots[i + 1]):
                    return 1.0
                return 0.0
            left_den = knots[i + degree] - knots[i]
            right_den = knots[i + degree + 1] - knots[i + 1]
            left = 0.0 if left_den == 0 else (x - knots[i]) / left_den * bspline_basis(knots, degree - 1, i, x)
            right = 0.0 if right_den == 0 else (knots[i + degree + 1] - x) / right_den * bspline_basis(
                knots, degree - 1, i + 1, x
            )
            return left + right

        n = len(column)
        sites = np.arange(n, dtype=float)
        # not-a-knot: drop the second and second-to-last interior sites
        interior = sites[2:-2][1:-1] if n > 6 else np.array([])
        knots = np.concatenate([np.repeat(sites[0], 4), sites[2:-2], np.repeat(sites[-1], 4)])
        n_coef = len(knots) - 4
        collocation = np.array([[bspline_basis(knots, 3, i, x) for i in range(n_coef)] for x in sites])
        coef = np.linalg.solve(collocation, column)
        queries = np.arange(n * r) / r
        oracle = np.array([
            sum(coef[i] * bspline_basis(knots, 3, i, min(x, sites[-1])) for i in range(n_coef))
            for x in queries
        ])

        data = np.zeros((3, 3, n))
        data[:, :] = column
        out = cubic_upsample_z(Volume3D(data=data, geometry=unit_geometry), r)
        # in-range queries must match the independent spline evaluation
        in_range = queries <= sites[-1]
        assert np.allclose(out.data[0, 0][in_range], oracle[in_range], atol=1e-9)

    def test_too_few_slices(self, unit_geometry):
        vol = Volume3D(data=np.zeros((5, 5, 3)), geometry=unit_geometry)
        with pytest.raises(ValueError):
            cubic_upsample_z(vol, 2)

    def test_geometry_pitch_divided(self):
        g = Geometry(1.0, 1.0, 3.0, 1.0)
        vol = Volume3D(data=np.zeros((5, 5, 8)), geometry=g)
        out = cubic_upsample_z(vol, 4)
        assert out.geometry.slice_pitch == pytest.approx(1.0)


class TestPatchCache:
    def test_round_trip(self, tmp_path):
        lf = random_volume((48, 48, 12), seed=11)
        hf = random_volume((48, 48, 48), seed=12)
        ps = extract_pairs(lf, hf, 4, bg_threshold=1.0, subject=3)
        path = str(tmp_path / "patches.bin")
        save_patchset(ps, path)
        back = load_patchset(path)
        assert back.subject == 3
        assert back.grid == ps.grid
        assert back.grid_indices == ps.grid_indices
        for a, b in zip(back.lf_patches, ps.lf_patches):
            assert np.array_equal(a, b.astype(np.float32))
        for a, b in zip(back.hf_patches, ps.hf_patches):
            assert np.array_equal(a, b.astype(np.float32))
