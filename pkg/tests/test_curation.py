"""Curation rules: masking, flat detection, resampling, labels, splits.

``oracle_accept`` is a deliberately naive re-implementation of the label
rules used to cross-check ``accept_label`` on random and boundary inputs;
the bulk-equivalence run lives in the acceptance suite.
"""

from datetime import datetime, timedelta, timezone
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgresp import curation
from ecgresp.curation import (
    CurationError,
    EcgMinute,
    MinuteLabel,
    accept_label,
    aggregate_label,
    align,
    assign_split,
    detect_flat,
    extract_minutes,
    remove_out_of_range,
    resample_to_120hz,
    split_by_patient,
    znormalize,
    znormalize_batch,
    MINUTE_SAMPLES,
)
from ecgresp.synth import SynthParams, synth_ecg

UTC = timezone.utc


def oracle_accept(min_rr, mean_rr, max_rr, std_rr):
    """Straightforward restatement of the four rules, in order."""
    if min_rr <= 0:
        return "min_nonpositive"
    if mean_rr < 10 or mean_rr > 50:
        return "mean_range"
    if max_rr - min_rr >= 10:
        return "spread"
    if std_rr >= 2:
        return "std"
    return None


# ---------------------------------------------------------------------------
# remove_out_of_range
# ---------------------------------------------------------------------------


class TestRemoveOutOfRange:
    def test_exact_boundary_passes(self):
        mask = remove_out_of_range(np.array([0.0, 59.9, -60.0]), np.zeros(3, bool))
        assert not mask.any()

    def test_above_threshold_masked(self):
        assert remove_out_of_range(np.array([61.0]), np.zeros(1, bool)).tolist() == [True]

    def test_negative_excess_masked(self):
        assert remove_out_of_range(np.array([-60.0001]), np.zeros(1, bool)).tolist() == [True]

    def test_all_masked_input_unchanged(self):
        mask = np.ones(4, bool)
        out = remove_out_of_range(np.array([0.0, 100.0, -100.0, 1.0]), mask)
        assert out.all()

    def test_existing_mask_bits_kept(self):
        out = remove_out_of_range(np.array([0.0, 0.0]), np.array([True, False]))
        assert out.tolist() == [True, False]

    def test_idempotent(self):
        x = np.array([0.0, 75.0, -61.0, 59.0])
        m1 = remove_out_of_range(x, np.zeros(4, bool))
        assert np.array_equal(remove_out_of_range(x, m1), m1)


# ---------------------------------------------------------------------------
# detect_flat
# ---------------------------------------------------------------------------


class TestDetectFlat:
    def test_constant_is_flat(self):
        assert detect_flat(np.full(MINUTE_SAMPLES, 0.5))

    def test_range_below_threshold_flat(self):
        x = np.zeros(MINUTE_SAMPLES)
        x[0] = 0.009
        assert detect_flat(x)

    def test_range_above_threshold_not_flat(self):
        x = np.zeros(MINUTE_SAMPLES)
        x[0] = 0.011
        assert not detect_flat(x)

    def test_synthetic_minute_not_flat(self):
        rec = synth_ecg(SynthParams(seed=1), duration_s=60.0)
        assert not detect_flat(rec.record.physical(0))


# ---------------------------------------------------------------------------
# resample_to_120hz
# ---------------------------------------------------------------------------


class TestResample:
    def test_240hz_minute_gives_7200(self):
        rec = synth_ecg(SynthParams(seed=2), duration_s=60.0, sample_rate=240)
        out = resample_to_120hz(rec.record.physical(0), Fraction(240))
        assert out.shape == (7200,)

    def test_identity_at_120hz(self):
        x = np.random.default_rng(0).standard_normal(7200)
        out = resample_to_120hz(x, 120)
        assert out is not x or np.shares_memory(out, x)
        assert np.array_equal(out, x)

    def test_constant_preserved_noninteger_ratio(self):
        x = np.full(30000, 3.25)
        out = resample_to_120hz(x, Fraction(500))
        assert out.shape == (7200,)
        assert np.allclose(out, 3.25, atol=1e-9)

    def test_constant_preserved_integer_ratio(self):
        out = resample_to_120hz(np.full(14400, -1.5), 240)
        assert np.allclose(out, -1.5, atol=1e-9)

    def test_upsampling_rejected(self):
        with pytest.raises(CurationError, match="upsampling"):
            resample_to_120hz(np.zeros(100), 60)

    def test_sine_preserved_under_decimation(self):
        # 5 Hz tone is far below the 54 Hz cutoff: decimation must keep it
        t = np.arange(24000) / 480.0
        x = np.sin(2 * np.pi * 5.0 * t)
        out = resample_to_120hz(x, 480)
        t_out = np.arange(len(out)) / 120.0
        assert np.allclose(out[120:-120], np.sin(2 * np.pi * 5.0 * t_out)[120:-120], atol=1e-3)


# ---------------------------------------------------------------------------
# znormalize
# ---------------------------------------------------------------------------


class TestZnormalize:
    def test_two_point_example(self):
        assert znormalize(np.array([1.0, 3.0])).tolist() == [-1.0, 1.0]

    def test_postconditions(self):
        x = np.random.default_rng(1).standard_normal(7200) * 3 + 7
        z = znormalize(x)
        assert abs(z.mean()) < 1e-9
        assert abs(z.std() - 1.0) < 1e-9

    @given(
        st.floats(0.01, 100.0),
        st.floats(-50.0, 50.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_affine_invariance(self, a, b):
        x = np.random.default_rng(2).standard_normal(128)
        assert np.allclose(znormalize(a * x + b), znormalize(x), atol=1e-8)

    def test_constant_rejected(self):
        with pytest.raises(CurationError, match="flat"):
            znormalize(np.full(10, 2.0))

    def test_batch_matches_single(self):
        X = np.random.default_rng(3).standard_normal((5, 64))
        Z = znormalize_batch(X)
        for i in range(5):
            assert np.allclose(Z[i], znormalize(X[i]))


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


class TestAggregateLabel:
    def test_constant_window(self):
        lab = aggregate_label(np.full(30, 15.0))
        assert (lab.mean_rr, lab.min_rr, lab.max_rr, lab.std_rr, lab.n_samples) == (
            15.0,
            15.0,
            15.0,
            0.0,
            30,
        )

    def test_two_sample_window_population_std(self):
        lab = aggregate_label(np.array([10.0, 20.0]))
        assert lab.mean_rr == 15.0 and lab.min_rr == 10.0 and lab.max_rr == 20.0
        assert lab.std_rr == 5.0  # population, not sample
        assert lab.n_samples == 2

    def test_empty_window_unlabeled(self):
        assert aggregate_label(np.array([])) is None


class TestAcceptLabel:
    def test_clean_label_accepted(self):
        d = accept_label(MinuteLabel(15.0, 12.0, 18.0, 1.5, 30))
        assert d.accepted and d.reason is None

    def test_zero_min_rejected_first(self):
        d = accept_label(MinuteLabel(15.0, 0.0, 20.0, 1.0, 30))
        assert (d.accepted, d.reason) == (False, "min_nonpositive")

    def test_spread_boundary_rejects(self):
        d = accept_label(MinuteLabel(15.0, 12.0, 22.0, 1.9, 30))
        assert (d.accepted, d.reason) == (False, "spread")

    def test_std_boundary_rejects(self):
        d = accept_label(MinuteLabel(15.0, 14.0, 16.0, 2.0, 30))
        assert (d.accepted, d.reason) == (False, "std")

    def test_mean_boundaries_inclusive(self):
        assert accept_label(MinuteLabel(10.0, 9.0, 11.0, 0.5, 30)).accepted
        assert accept_label(MinuteLabel(50.0, 49.0, 51.0, 0.5, 30)).accepted

    def test_mean_outside_rejected(self):
        assert accept_label(MinuteLabel(9.99, 9.0, 11.0, 0.5, 30)).reason == "mean_range"
        assert accept_label(MinuteLabel(50.01, 49.0, 52.0, 0.5, 30)).reason == "mean_range"

    @given(
        st.floats(-1.0, 25.0),
        st.floats(0.0, 30.0),
        st.floats(0.0, 3.0),
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_oracle(self, min_rr, spread, std_rr):
        max_rr = min_rr + spread
        mean_rr = (min_rr + max_rr) / 2
        label = MinuteLabel(mean_rr, min_rr, max_rr, std_rr, 30)
        decision = accept_label(label)
        expected = oracle_accept(min_rr, mean_rr, max_rr, std_rr)
        assert decision.reason == expected
        assert decision.accepted == (expected is None)


# ---------------------------------------------------------------------------
# extract_minutes
# ---------------------------------------------------------------------------


class TestExtractMinutes:
    def _record(self, minutes=10, seed=5):
        return synth_ecg(SynthParams(seed=seed), duration_s=60.0 * minutes, record_name="p1")

    def test_clean_record_yields_all_minutes(self):
        rec = self._record(10).record
        minutes = extract_minutes(rec, 0)
        assert len(minutes) == 10
        for i, m in enumerate(minutes):
            assert m.samples.shape == (MINUTE_SAMPLES,)
            assert m.start_time == rec.start_time + timedelta(seconds=60 * i)
            assert m.lead_name == "I"
            assert m.patient_id == "p1"

    def test_masked_sample_drops_only_its_minute(self):
        rec = self._record(3).record
        rec.mask[0][90 * 120] = True  # t = 90 s -> minute [60, 120)
        starts = [m.start_time for m in extract_minutes(rec, 0)]
        assert len(starts) == 2
        assert rec.start_time + timedelta(seconds=60) not in starts

    def test_short_record_yields_nothing(self):
        rec = self._record(1).record
        for lead in range(rec.n_leads):
            rec.adu[lead] = rec.adu[lead][: 59 * 120]
            rec.mask[lead] = rec.mask[lead][: 59 * 120]
        assert extract_minutes(rec, 0) == []

    def test_flat_lead_dropped(self):
        rec = self._record(2).record
        rec.adu[0][:] = 100  # constant -> flat
        assert extract_minutes(rec, 0) == []

    def test_no_minute_contains_masked_samples(self):
        rec = self._record(5).record
        rng = np.random.default_rng(0)
        idx = rng.integers(0, rec.n_samples, size=30)
        rec.mask[0][idx] = True
        minutes = extract_minutes(rec, 0)
        masked_minutes = {int(i // (60 * 120)) for i in idx}
        assert len(minutes) == 5 - len(masked_minutes)


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------


def minute(start, patient="p", lead="II", seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(MINUTE_SAMPLES)
    return EcgMinute(patient_id=patient, lead_name=lead, start_time=start, samples=x)


class TestAlign:
    t0 = datetime(2024, 1, 1, tzinfo=UTC)

    def _rr(self, value=15.0, minutes=1):
        times = self.t0.timestamp() + np.arange(0, 60 * minutes, 2.0)
        return times, np.full_like(times, value)

    def test_four_leads_one_label_four_examples(self):
        minutes = [minute(self.t0, lead=l, seed=i) for i, l in enumerate("ABCD")]
        times, vals = self._rr()
        out = align(minutes, times, vals)
        assert len(out) == 4
        assert all(ex.label == 15.0 for ex in out)
        assert [ex.ecg.lead_name for ex in out] == ["A", "B", "C", "D"]

    def test_rejected_label_yields_nothing(self):
        minutes = [minute(self.t0)]
        times = self.t0.timestamp() + np.arange(0, 60, 2.0)
        vals = np.linspace(10, 30, len(times))  # spread 20 >= 10 -> reject
        log = []
        out = align(minutes, times, vals, rejection_log=log)
        assert out == []
        assert log == [(self.t0, "spread")]

    def test_no_overlap_warns_and_returns_empty(self):
        minutes = [minute(self.t0)]
        times = self.t0.timestamp() + 86400 + np.arange(0, 60, 2.0)
        with pytest.warns(UserWarning, match="overlap"):
            out = align(minutes, times, np.full_like(times, 15.0))
        assert out == []

    def test_unlabeled_minute_skipped(self):
        minutes = [minute(self.t0), minute(self.t0 + timedelta(seconds=60), seed=1)]
        times = self.t0.timestamp() + np.arange(0, 60, 2.0)  # only first minute labeled
        out = align(minutes, times, np.full_like(times, 12.0))
        assert len(out) == 1
        assert out[0].ecg.start_time == self.t0


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


class TestSplits:
    def _examples(self, patients):
        out = []
        for i, p in enumerate(patients):
            out.append(
                curation.MinuteExample(ecg=minute(self.t0, patient=p, seed=i), label=15.0)
            )
        return out

    t0 = datetime(2024, 1, 1, tzinfo=UTC)

    def test_deterministic_assignment(self):
        for p in ["a", "b", "zz9"]:
            assert assign_split(p, seed=7) == assign_split(p, seed=7)

    def test_seed_changes_assignment_distribution(self):
        names = [f"p{i}" for i in range(200)]
        a = [assign_split(p, 0) for p in names]
        b = [assign_split(p, 1) for p in names]
        assert a != b

    def test_disjoint_patients(self):
        examples = self._examples([f"p{i % 20}" for i in range(100)])
        splits = split_by_patient(examples, seed=3)
        ids = [splits[k].patient_ids for k in ("train", "tune", "test")]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])

    def test_fractions_converge(self):
        names = [f"patient{i}" for i in range(10000)]
        counts = {"train": 0, "tune": 0, "test": 0}
        for p in names:
            counts[assign_split(p, seed=0)] += 1
        assert abs(counts["train"] / 10000 - 0.8) < 0.02
        assert abs(counts["tune"] / 10000 - 0.1) < 0.02
        assert abs(counts["test"] / 10000 - 0.1) < 0.02

    def test_single_patient_warns_all_train(self):
        examples = self._examples(["solo"] * 3)
        with pytest.warns(UserWarning, match="single-patient"):
            splits = split_by_patient(examples)
        assert len(splits["train"].examples) == 3
        assert not splits["tune"].examples and not splits["test"].examples

    def test_bad_fractions_rejected(self):
        with pytest.raises(CurationError, match="sum to 1"):
            split_by_patient(self._examples(["a", "b"]), fractions=(0.5, 0.2, 0.2))


def test_example_normalized_on_consumption():
    ex = curation.MinuteExample(ecg=minute(datetime(2024, 1, 1, tzinfo=UTC)), label=14.0)
    z = ex.normalized()
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9


def test_minute_invariants_enforced():
    with pytest.raises(CurationError, match="7200"):
        EcgMinute("p", "II", datetime(2024, 1, 1, tzinfo=UTC), np.zeros(100))
    with pytest.raises(CurationError, match="flat"):
        EcgMinute("p", "II", datetime(2024, 1, 1, tzinfo=UTC), np.zeros(MINUTE_SAMPLES))
    big = np.random.default_rng(0).standard_normal(MINUTE_SAMPLES) * 100
    with pytest.raises(CurationError, match="60"):
        EcgMinute("p", "II", datetime(2024, 1, 1, tzinfo=UTC), big)
