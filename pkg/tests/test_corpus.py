import numpy as np
import pytest

from sisr import corpus as cs
from sisr.backbones import Vocabulary, patchify
from sisr.config import ConfigError, RunConfig


def small_cfg(**kw):
    base = dict(n_samples=32, corpus_seed=7)
    base.update(kw)
    return RunConfig(**base)


class TestGenerateCorpus:
    def test_deterministic(self):
        a = cs.generate_corpus(small_cfg())
        b = cs.generate_corpus(small_cfg())
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert sa.report == sb.report
            assert sa.lesion_patches == sb.lesion_patches

    def test_all_normal(self):
        samples = cs.generate_corpus(small_cfg(normal_ratio=1.0))
        assert all(s.report == cs.NORMAL_REPORT for s in samples)
        assert all(s.lesion_patches == [] for s in samples)

    def test_abnormal_fraction_default(self):
        samples = cs.generate_corpus(RunConfig())
        frac = sum(1 for s in samples if s.labels) / len(samples)
        assert abs(frac - 0.30) < 0.04  # binomial bound at n=512

    def test_invalid_ratio(self):
        with pytest.raises(ConfigError):
            cs.generate_corpus(small_cfg(normal_ratio=1.5))

    def test_grammar_determinism(self):
        lesion = cs.LesionSpec(kind="opacity", zone=(0, 1), severity="moderate",
                               center=(12.0, 44.0))
        assert lesion.sentence() == \
            "there is a moderate opacity in the right upper zone ."

    def test_vocabulary_bound(self):
        samples = cs.generate_corpus(RunConfig(n_samples=256, normal_ratio=0.2))
        vocab = Vocabulary.from_corpus(s.report for s in samples)
        assert len(vocab) <= 120


class TestGroundTruthSaliency:
    def test_normal_empty(self):
        sample = cs.render_sample([], 64, np.random.default_rng(0), 0.02, 8)
        assert cs.ground_truth_saliency(sample) == set()

    def test_lesion_inside_one_patch(self):
        lesion = cs.LesionSpec(kind="nodule", zone=(0, 0), severity="mild",
                               center=(12.0, 12.0))
        sample = cs.render_sample([lesion], 64, np.random.default_rng(0), 0.0, 8)
        # mild nodule radius 3.2 centered mid-patch: fits in patch (1,1) = 9
        assert cs.ground_truth_saliency(sample) == {9}

    def test_straddling_lesion_pixel_oracle(self):
        lesion = cs.LesionSpec(kind="consolidation", zone=(0, 0), severity="mild",
                               center=(16.0, 16.0))
        sample = cs.render_sample([lesion], 64, np.random.default_rng(0), 0.0, 8)
        # pixel-level brute force over the rendered footprint
        bump, fp = cs._render_lesion(64, lesion, 1.0)
        expect = set()
        for p in range(64):
            gy, gx = divmod(p, 8)
            block = fp[gy * 8:(gy + 1) * 8, gx * 8:(gx + 1) * 8]
            if block.mean() > 0.10:
                expect.add(p)
        assert cs.ground_truth_saliency(sample) == expect
        assert len(expect) == 4  # straddles a 2x2 patch block


class TestExtractLabels:
    def test_positive(self):
        labels = cs.extract_labels("there is a mild opacity in the left upper zone .")
        assert labels == {"opacity"}

    def test_negation(self):
        assert cs.extract_labels("no acute findings .") == frozenset()

    def test_round_trip_random_lesion_sets(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            lesions = cs._sample_lesions(rng, 64)
            report = " ".join(l.sentence() for l in lesions) + " " + cs.ABNORMAL_TAIL
            assert cs.extract_labels(report) == cs.labels_of(lesions)

    def test_round_trip_generated_corpus(self):
        for s in cs.generate_corpus(small_cfg(normal_ratio=0.0)):
            assert cs.extract_labels(s.report) == s.labels


class TestSeverityMonotonicity:
    @pytest.mark.parametrize("kind", cs.KINDS)
    def test_area_and_contrast_increase(self, kind):
        areas, peaks = [], []
        for severity in cs.SEVERITIES:
            lesion = cs.LesionSpec(kind=kind, zone=(1, 0), severity=severity,
                                   center=(32.0, 16.0))
            bump, fp = cs._render_lesion(64, lesion, 1.0)
            areas.append(fp.sum())
            peaks.append(bump.max())
        assert areas[0] < areas[1] < areas[2]
        assert peaks[0] < peaks[1] < peaks[2]


class TestDiskFormat:
    def test_manifest_round_trip(self, tmp_path):
        samples = cs.generate_corpus(small_cfg(normal_ratio=0.3))
        cs.write_corpus(samples, tmp_path)
        loaded = cs.read_corpus(tmp_path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert np.array_equal(a.image, b.image)
            assert a.report == b.report
            assert a.lesion_patches == b.lesion_patches
            assert a.labels == b.labels

    def test_rerun_byte_identical_manifest(self, tmp_path):
        cs.write_corpus(cs.generate_corpus(small_cfg()), tmp_path / "a")
        cs.write_corpus(cs.generate_corpus(small_cfg()), tmp_path / "b")
        assert (tmp_path / "a" / "manifest.tsv").read_bytes() == \
            (tmp_path / "b" / "manifest.tsv").read_bytes()
