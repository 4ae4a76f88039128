"""Tests for synthetic study generation."""

import numpy as np
import pytest

from anatomvlp.phantom import (PhantomError, PhantomSpec, generate_case,
                               generate_split, load_case, save_case)


def small_spec(**kw):
    base = dict(volume_shape=(32, 32, 16), anatomy_count=4, seed=11)
    base.update(kw)
    return PhantomSpec(**base)


class TestSpecValidation:
    def test_prevalence_out_of_range(self):
        with pytest.raises(PhantomError):
            small_spec(anomaly_prevalence=1.5)

    def test_unknown_anomaly_type(self):
        with pytest.raises(PhantomError):
            small_spec(anomaly_types=("blob", "meteor"))

    def test_prevalence_dict_expansion(self):
        spec = small_spec(anomaly_prevalence={"blob": 0.2})
        assert spec.prevalence.shape == (4, 3)
        assert np.allclose(spec.prevalence[:, spec.anomaly_types.index("blob")], 0.2)
        assert np.allclose(spec.prevalence[:, spec.anomaly_types.index("texture")], 0.0)

    def test_bad_intensity_range(self):
        with pytest.raises(PhantomError):
            small_spec(intensity_range=(100, -100))


class TestGenerateCase:
    def test_zero_prevalence_all_normal(self):
        case = generate_case(small_spec(anomaly_prevalence=0.0), 0)
        assert case.labels.sum() == 0
        assert all("unremarkable" in s for s in case.report_sentences)

    def test_full_prevalence_all_abnormal(self):
        case = generate_case(small_spec(anomaly_prevalence=1.0), 0)
        assert case.labels.sum() == case.labels.size

    def test_determinism(self):
        spec = small_spec(anomaly_prevalence=0.5)
        a = generate_case(spec, 3)
        b = generate_case(spec, 3)
        assert np.array_equal(a.volume, b.volume)
        assert np.array_equal(a.masks, b.masks)
        assert a.report_sentences == b.report_sentences

    def test_small_volume_rejected(self):
        with pytest.raises(PhantomError):
            generate_case(small_spec(volume_shape=(32, 32, 4)), 0)

    def test_masks_disjoint_and_nonempty(self):
        for idx in range(5):
            case = generate_case(small_spec(anomaly_prevalence=0.5), idx)
            total = case.masks.sum(axis=0)
            assert total.max() <= 1
            assert all(case.masks[j].sum() > 0 for j in range(case.masks.shape[0]))

    def test_label_sentence_consistency(self):
        case = generate_case(small_spec(anomaly_prevalence=0.5), 7)
        for j in range(case.labels.size):
            if case.labels[j]:
                assert case.anomalies[j] in case.report_sentences[j]
            else:
                assert "unremarkable" in case.report_sentences[j]

    def test_intensities_within_range(self):
        case = generate_case(small_spec(anomaly_prevalence=1.0), 1)
        assert case.volume.min() >= -1000.0
        assert case.volume.max() <= 1000.0


class TestGenerateSplit:
    def test_counts_and_unique_ids(self):
        tr, va, te = generate_split(small_spec(), 10, 4, 3)
        ids = [c.case_id for c in tr + va + te]
        assert len(ids) == 17
        assert len(set(ids)) == 17

    def test_zero_train_rejected(self):
        with pytest.raises(PhantomError):
            generate_split(small_spec(), 0, 1, 1)

    def test_prevalence_concentration(self):
        # Binomial(200, 0.5): P(|mean - 0.5| > 0.1) < 2*exp(-2*200*0.01) ~ 3.7e-2
        # per anatomy; the fixed seed freezes an observed-in-range draw.
        spec = small_spec(anomaly_types=("blob",), anomaly_prevalence=0.5, seed=5)
        tr, _, _ = generate_split(spec, 200, 1, 1)
        frac = np.mean([c.labels for c in tr], axis=0)
        assert np.all(frac >= 0.4) and np.all(frac <= 0.6)


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        case = generate_case(small_spec(anomaly_prevalence=0.7), 2)
        save_case(case, tmp_path)
        loaded = load_case(tmp_path / case.case_id)
        assert np.array_equal(loaded.volume, case.volume)
        assert np.array_equal(loaded.masks, case.masks)
        assert np.array_equal(loaded.labels, case.labels)
        assert loaded.report_sentences == case.report_sentences
        assert loaded.anomalies == case.anomalies
