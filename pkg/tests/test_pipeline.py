import numpy as np

from iqt import DEFAULT_DISTRIBUTIONS, PhantomConfig
from iqt.pipeline import build_training_set, make_subjects


class TestMakeSubjects:
    def test_deterministic(self):
        cfg = PhantomConfig(dims=(32, 32, 32))
        a = make_subjects(2, 4, DEFAULT_DISTRIBUTIONS["t1w"], cfg, seed=5)
        b = make_subjects(2, 4, DEFAULT_DISTRIBUTIONS["t1w"], cfg, seed=5)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.hf.data, s2.hf.data)
            assert np.array_equal(s1.lf.data, s2.lf.data)

    def test_fixed_contrast_collapses_distribution(self):
        cfg = PhantomConfig(dims=(32, 32, 32))
        subjects = make_subjects(3, 4, DEFAULT_DISTRIBUTIONS["t1w"], cfg, seed=1, fixed_contrast=True)
        # same phantom geometry family but identical contrast handling:
        # each subject's LF差 comes only from anatomy and noise, and the
        # downsampled z extent follows the slice-count rule
        for s in subjects:
            assert s.lf.dims == (32, 32, 8)

    def test_subjects_differ(self):
        cfg = PhantomConfig(dims=(32, 32, 32))
        subjects = make_subjects(2, 2, DEFAULT_DISTRIBUTIONS["t1w"], cfg, seed=2)
        assert not np.array_equal(subjects[0].hf.data, subjects[1].hf.data)


class TestBuildTrainingSet:
    def test_patchsets_carry_subject_ids(self):
        cfg = PhantomConfig(dims=(32, 32, 32))
        subjects = make_subjects(3, 4, DEFAULT_DISTRIBUTIONS["t1w"], cfg, seed=3, fixed_contrast=True)
        patchsets, table = build_training_set(subjects, 4)
        assert [ps.subject for ps in patchsets] == [0, 1, 2]
        assert len(table.target_landmarks) == 11
        # normalized LF patches pair with raw HF patches at r-scaled z
        ps = patchsets[0]
        assert ps.grid.patch == (32, 32, 8)
        assert ps.grid.hf_patch == (32, 32, 32)
