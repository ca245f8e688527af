"""Pipeline glue: record curation flow, array packing, split views."""

import numpy as np
import pytest

from ecgresp.pipeline import (
    cohort_truth_timeline,
    curate_record,
    examples_to_arrays,
    group_minutes_by_lead,
    make_minute_dataset,
    split_arrays,
)
from ecgresp.synth import SynthParams, synth_ecg


@pytest.fixture(scope="module")
def synth_rec():
    return synth_ecg(SynthParams(seed=3), duration_s=300.0, record_name="pX")


class TestCurateRecord:
    def test_clean_record_full_yield(self, synth_rec):
        examples = curate_record(
            synth_rec.record, synth_rec.rr_times, synth_rec.rr_values, patient_id="pX"
        )
        # 5 minutes x 4 leads
        assert len(examples) == 20
        assert {ex.ecg.lead_name for ex in examples} == {"I", "II", "III", "V"}
        assert all(ex.patient_id == "pX" for ex in examples)

    def test_out_of_range_sample_drops_minute(self):
        rec = synth_ecg(SynthParams(seed=4), duration_s=180.0)
        # spike lead 0 beyond +-60 mV inside minute 1
        rec.record.adu[0][90 * 120] = 61 * 200 + 10
        examples = curate_record(rec.record, rec.rr_times, rec.rr_values)
        by_lead = {}
        for ex in examples:
            by_lead.setdefault(ex.ecg.lead_name, []).append(ex)
        assert len(by_lead["I"]) == 2  # lead 0 lost its middle minute
        assert all(len(v) == 3 for k, v in by_lead.items() if k != "I")

    def test_240hz_record_resampled_through_pipeline(self):
        rec = synth_ecg(SynthParams(seed=8), duration_s=180.0, sample_rate=240)
        examples = curate_record(rec.record, rec.rr_times, rec.rr_values, patient_id="hi")
        assert len(examples) == 12  # 3 minutes x 4 leads
        for ex in examples:
            assert ex.ecg.samples.shape == (7200,)

    def test_rejection_log_collects(self):
        rec = synth_ecg(SynthParams(seed=5), duration_s=120.0)
        wild = rec.rr_values.copy()
        wild[:] = 15.0
        wild[5] = 40.0  # spread 25 in minute 0 -> reject
        log = []
        examples = curate_record(
            rec.record, rec.rr_times, wild, rejection_log=log
        )
        assert len(examples) == 4  # only minute 1 survives, 4 leads
        assert len(log) == 1 and log[0][1] == "spread"


class TestArrays:
    def test_examples_to_arrays_shapes(self, synth_rec):
        examples = curate_record(
            synth_rec.record, synth_rec.rr_times, synth_rec.rr_values, patient_id="pX"
        )
        X, y, patients, sources = examples_to_arrays(examples)
        assert X.shape == (20, 7200) and X.dtype == np.float32
        assert y.shape == (20,)
        assert set(patients) == {"pX"} and set(sources) == {"synthetic"}

    def test_empty_examples(self):
        X, y, patients, sources = examples_to_arrays([])
        assert X.shape == (0, 7200) and len(y) == 0

    def test_split_views_disjoint_and_complete(self):
        X, y, patients = make_minute_dataset(n_patients=30, minutes_per_patient=2, seed=1)
        splits = split_arrays(X, y, patients, seed=4)
        total = sum(len(v[1]) for v in splits.values())
        assert total == len(y)
        sets = [set(v[2]) for v in splits.values()]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])

    def test_single_patient_all_train(self):
        X, y, patients = make_minute_dataset(n_patients=1, minutes_per_patient=2, seed=2)
        splits = split_arrays(X, y, patients)
        assert len(splits["train"][1]) == 2
        assert len(splits["tune"][1]) == 0


class TestHelpers:
    def test_group_minutes_by_lead(self, synth_rec):
        examples = curate_record(
            synth_rec.record, synth_rec.rr_times, synth_rec.rr_values, patient_id="pX"
        )
        minutes = [ex.ecg for ex in examples]
        grouped = group_minutes_by_lead(minutes)
        assert set(grouped) == {"I", "II", "III", "V"}
        assert all(len(v) == 5 for v in grouped.values())

    def test_cohort_truth_timeline(self):
        tl = cohort_truth_timeline(np.array([0.0, 60.0]), np.array([15.0, 16.0]), "p")
        assert tl.patient_id == "p"
        assert len(tl) == 2

    def test_dataset_labels_in_range(self):
        X, y, patients = make_minute_dataset(
            n_patients=10, minutes_per_patient=3, rr_lo=12.0, rr_hi=18.0, seed=6
        )
        assert len(y) == 30
        assert y.min() >= 12.0 and y.max() <= 18.0
