import numpy as np
import pytest

from iqt import (
    Geometry,
    LandmarkTable,
    Volume3D,
    apply_normalization,
    compute_landmarks,
    fit_normalizer,
    slice_intensity_correct,
)
from iqt.errors import EstimationError
from iqt.normalizer import DEFAULT_PERCENTILES


def _volume_from_values(values, shape=(30, 30, 30)):
    """Foreground `values` packed into an otherwise-zero volume."""
    data = np.zeros(shape)
    flat = data.reshape(-1)
    flat[: len(values)] = values
    return Volume3D(data=data, geometry=Geometry.isotropic(1.0))


class TestComputeLandmarks:
    def test_constant_foreground(self):
        vol = _volume_from_values(np.full(500, 7.0))
        marks = compute_landmarks(vol, (1, 50, 99))
        assert np.all(marks == 7.0)

    def test_uniform_sample_order_statistics(self):
        # explicit sample oracle: percentiles of U[0,100] with n-1 = 10000
        rng = np.random.default_rng(0)
        values = rng.uniform(0.0, 100.0, size=10001)
        vol = _volume_from_values(values)
        marks = compute_landmarks(vol, (10, 50, 90))
        srt = np.sort(values)
        oracle = [srt[1000], srt[5000], srt[9000]]
        assert np.allclose(marks, oracle)
        assert np.allclose(marks, [10, 50, 90], atol=2.0)

    def test_non_ascending_percentiles(self):
        vol = _volume_from_values(np.arange(200.0) + 1)
        with pytest.raises(ValueError):
            compute_landmarks(vol, (50, 10, 90))

    def test_empty_foreground(self):
        vol = Volume3D(data=np.zeros((10, 10, 10)), geometry=Geometry.isotropic(1.0))
        with pytest.raises(EstimationError):
            compute_landmarks(vol)


class TestFitNormalizer:
    def test_single_volume(self):
        vol = _volume_from_values(np.arange(1.0, 2002.0))
        table = fit_normalizer([vol])
        assert np.allclose(table.target_landmarks, compute_landmarks(vol))

    def test_mean_of_two(self):
        base = np.arange(1.0, 2002.0)
        v1 = _volume_from_values(base)
        v2 = _volume_from_values(3.0 * base)
        table = fit_normalizer([v1, v2])
        assert np.allclose(table.target_landmarks, 2.0 * compute_landmarks(v1))

    def test_permutation_invariant(self):
        vols = [_volume_from_values(np.arange(1.0, 1002.0) * s) for s in (1.0, 2.5, 0.5)]
        t1 = fit_normalizer(vols)
        t2 = fit_normalizer(vols[::-1])
        assert t1.target_landmarks == t2.target_landmarks

    def test_empty_list(self):
        with pytest.raises(ValueError):
            fit_normalizer([])


class TestApplyNormalization:
    def test_identity_table(self):
        vol = _volume_from_values(np.linspace(5, 50, 1001))
        marks = tuple(compute_landmarks(vol))
        table = LandmarkTable(percentiles=DEFAULT_PERCENTILES, source_landmarks=marks, target_landmarks=marks)
        out = apply_normalization(vol, table)
        assert np.allclose(out.data, vol.data, atol=1e-9)

    def test_fitted_table_hits_targets_exactly(self):
        # foreground counts with (n-1) % 100 == 0 put every percentile on an
        # order statistic, so mapped landmarks equal the targets exactly
        rng = np.random.default_rng(3)
        vols = [_volume_from_values(rng.uniform(10 * (i + 1), 100 * (i + 1), size=20001)) for i in range(3)]
        table = fit_normalizer(vols)
        for vol in vols:
            out = apply_normalization(vol, table)
            got = compute_landmarks(out)
            assert np.array_equal(got, np.asarray(table.target_landmarks))

    def test_linear_table_doubles(self):
        vol = _volume_from_values(np.linspace(1, 99, 2001))
        src = tuple(np.linspace(1.0, 99.0, len(DEFAULT_PERCENTILES)))
        tgt = tuple(2.0 * np.asarray(src))
        table = LandmarkTable(percentiles=DEFAULT_PERCENTILES, source_landmarks=src, target_landmarks=tgt)
        out = apply_normalization(vol, table)
        fg = vol.data != 0
        assert np.allclose(out.data[fg], 2.0 * vol.data[fg], rtol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        vol = _volume_from_values(rng.uniform(3, 300, size=20001))
        other = _volume_from_values(rng.uniform(1, 200, size=15001))
        table = fit_normalizer([vol, other])
        once = apply_normalization(vol, table)
        twice = apply_normalization(once, table)
        assert np.allclose(twice.data, once.data, atol=1e-6)

    def test_monotone(self):
        rng = np.random.default_rng(6)
        vol = _volume_from_values(rng.uniform(1, 500, size=9001))
        table = fit_normalizer([vol, _volume_from_values(rng.gamma(4.0, 20.0, size=8001))])
        probes = np.sort(rng.uniform(0.5, 600, size=10_000))
        probe_vol = _volume_from_values(probes, shape=(22, 22, 22))
        mapped = apply_normalization(probe_vol, table).data.reshape(-1)[: len(probes)]
        assert np.all(np.diff(mapped) >= -1e-9)

    def test_background_preserved(self):
        vol = _volume_from_values(np.linspace(10, 90, 501))
        table = fit_normalizer([vol])
        out = apply_normalization(vol, table)
        assert np.all(out.data[vol.data == 0] == 0.0)

    def test_degenerate_segment_maps_to_midpoint(self):
        table = LandmarkTable(
            percentiles=(1, 50, 99),
            source_landmarks=(1.0, 1.0, 2.0),
            target_landmarks=(10.0, 20.0, 30.0),
        )
        vol = _volume_from_values(np.array([1.0, 1.5, 2.0]), shape=(16, 16, 16))
        out = apply_normalization(vol, table).data.reshape(-1)[:3]
        assert out[0] == 15.0  # tie run maps to target midpoint
        assert out[1] == 25.0
        assert out[2] == 30.0

    def test_tail_extension_linear(self):
        src = (10.0, 20.0, 30.0)
        tgt = (100.0, 200.0, 260.0)
        table = LandmarkTable(percentiles=(1, 50, 99), source_landmarks=src, target_landmarks=tgt)
        vol = _volume_from_values(np.array([5.0, 35.0]), shape=(16, 16, 16))
        out = apply_normalization(vol, table).data.reshape(-1)[:2]
        assert out[0] == pytest.approx(100.0 - 5 * 10.0)  # first segment slope 10
        assert out[1] == pytest.approx(260.0 + 5 * 6.0)   # last segment slope 6

    def test_json_round_trip(self, tmp_path):
        table = fit_normalizer([_volume_from_values(np.linspace(4, 44, 1001))])
        path = str(tmp_path / "norm.json")
        table.save(path)
        back = LandmarkTable.load(path)
        assert back == table


class TestSliceCorrection:
    def _stacked_volume(self, seed=0, nz=10, scale_slice=None, scale=0.5):
        rng = np.random.default_rng(seed)
        base = rng.uniform(20, 60, size=(24, 24))
        data = np.stack([base for _ in range(nz)], axis=2).copy()
        if scale_slice is not None:
            data[:, :, scale_slice] *= scale
        return Volume3D(data=data, geometry=Geometry.isotropic(1.0))

    def test_shared_histogram_fixed_point(self):
        vol = self._stacked_volume()
        out = slice_intensity_correct(vol, 3)
        assert np.allclose(out.data, vol.data, atol=1e-6)

    def test_scaled_slice_recovers_mean(self):
        vol = self._stacked_volume(scale_slice=4)
        out = slice_intensity_correct(vol, 2)
        ref_mean = out.data[:, :, 2].mean()
        assert out.data[:, :, 4].mean() == pytest.approx(ref_mean, rel=0.02)

    def test_reference_slice_untouched(self):
        vol = self._stacked_volume(seed=3, scale_slice=1)
        out = slice_intensity_correct(vol, 5)
        assert np.array_equal(out.data[:, :, 5], vol.data[:, :, 5])

    def test_empty_reference_rejected(self):
        data = np.zeros((24, 24, 6))
        data[:, :, 0] = 10.0
        vol = Volume3D(data=data, geometry=Geometry.isotropic(1.0))
        with pytest.raises(ValueError):
            slice_intensity_correct(vol, 3)

    def test_background_zeros_preserved(self):
        vol = self._stacked_volume(seed=4, scale_slice=2)
        data = vol.data.copy()
        data[:8, :8, :] = 0.0
        vol = vol.with_data(data)
        out = slice_intensity_correct(vol, 6)
        assert np.all(out.data[:8, :8, :] == 0.0)
