"""Generator checks: modulation identifiability, determinism, schedules.

The central oracle: detect R peaks on the generated minute, FFT their
amplitude envelope, and confirm the spectral peak lands on the programmed
respiration frequency.  If this fails the learning task is unsolvable, so
it gates everything downstream.
"""

import numpy as np
import pytest

from ecgresp.curation import accept_label, aggregate_label
from ecgresp.synth import (
    Schedule,
    SynthParams,
    synth_cohort,
    synth_ecg,
)


def r_peak_amplitudes(samples: np.ndarray, fs: int = 120, hr_bpm: float = 75.0):
    """Peak picking on a comb of known approximate beat spacing."""
    spacing = int(fs * 60.0 / hr_bpm)
    peaks, amps = [], []
    i = spacing // 2
    while i + spacing // 2 < len(samples):
        w = samples[i - spacing // 2 : i + spacing // 2]
        j = int(np.argmax(w)) + i - spacing // 2
        peaks.append(j)
        amps.append(samples[j])
        i = j + spacing
    return np.array(peaks), np.array(amps)


def envelope_peak_frequency(peaks, amps, fs=120.0):
    """Dominant frequency of the R-amplitude envelope via an FFT oracle."""
    t = peaks / fs
    # resample envelope on a uniform 4 Hz grid
    grid = np.arange(t[0], t[-1], 0.25)
    env = np.interp(grid, t, amps)
    env = env - env.mean()
    spec = np.abs(np.fft.rfft(env * np.hanning(len(env))))
    freqs = np.fft.rfftfreq(len(env), d=0.25)
    return freqs[np.argmax(spec)]


class TestSynthEcg:
    def test_am_envelope_frequency_matches_programmed_rate(self):
        params = SynthParams(heart_rate=75, resp_rate=15.0, am_depth=0.2, noise_std_mv=0.0, seed=3)
        rec = synth_ecg(params, duration_s=120.0)
        peaks, amps = r_peak_amplitudes(rec.record.physical(0))
        f = envelope_peak_frequency(peaks, amps)
        assert abs(f - 0.25) < 0.5 / 60.0  # within 0.5 bpm of 15 bpm

    def test_identifiability_across_rates(self):
        for rr in (10.0, 18.0, 27.0):
            params = SynthParams(
                heart_rate=75, resp_rate=rr, am_depth=0.1, noise_std_mv=0.05, seed=11
            )
            rec = synth_ecg(params, duration_s=120.0)
            peaks, amps = r_peak_amplitudes(rec.record.physical(0))
            f = envelope_peak_frequency(peaks, amps)
            assert abs(f * 60.0 - rr) < 0.5

    def test_no_modulation_equal_r_amplitudes(self):
        params = SynthParams(
            heart_rate=60,  # beat period = 120 samples exactly on the grid
            resp_rate=15.0,
            am_depth=0.0,
            rsa_depth=0.0,
            baseline_wander_mv=0.0,
            noise_std_mv=0.0,
            seed=0,
        )
        rec = synth_ecg(params, duration_s=60.0)
        _, amps = r_peak_amplitudes(rec.record.physical(0), hr_bpm=60)
        assert np.all(np.abs(amps - amps[0]) < 1e-9)

    def test_identical_seeds_bit_identical(self):
        a = synth_ecg(SynthParams(seed=42), duration_s=60.0)
        b = synth_ecg(SynthParams(seed=42), duration_s=60.0)
        assert a.record == b.record
        assert np.array_equal(a.rr_values, b.rr_values)

    def test_different_seeds_differ(self):
        a = synth_ecg(SynthParams(seed=1), duration_s=60.0)
        b = synth_ecg(SynthParams(seed=2), duration_s=60.0)
        assert a.record != b.record

    def test_rr_truth_at_half_hz(self):
        rec = synth_ecg(SynthParams(resp_rate=13.0, seed=0), duration_s=120.0)
        assert len(rec.rr_times) == 60
        assert np.allclose(np.diff(rec.rr_times), 2.0)
        assert np.all(rec.rr_values == 13.0)

    def test_four_leads_named_and_scaled(self):
        rec = synth_ecg(SynthParams(seed=5, noise_std_mv=0.0), duration_s=60.0)
        assert rec.record.header.lead_names == ["I", "II", "III", "V"]
        p0 = rec.record.physical(0)
        p3 = rec.record.physical(3)
        assert np.corrcoef(p0, p3)[0, 1] > 0.999  # same waveform, scaled
        assert p3.std() < p0.std()

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError, match="resp_rate"):
            SynthParams(resp_rate=0.0)
        with pytest.raises(ValueError, match="duration"):
            synth_ecg(SynthParams(), duration_s=30.0)

    def test_varying_profile_tracks_rate(self):
        n = 240 * 120
        profile = np.concatenate([np.full(n // 2, 12.0), np.full(n // 2, 24.0)])
        rec = synth_ecg(SynthParams(seed=9), duration_s=240.0, resp_profile=profile)
        assert np.all(rec.rr_values[:59] == 12.0)
        assert np.all(rec.rr_values[61:] == 24.0)


class TestSchedule:
    def test_flat(self):
        s = Schedule("flat")
        assert np.all(s.rate_before_event(np.array([1.0, 30.0]), 16.0) == 16.0)

    def test_ramp_reaches_target_at_event(self):
        s = Schedule("ramp", delta_pct=20.0, hours=10.0)
        h = np.array([0.0, 5.0, 10.0, 20.0])
        np.testing.assert_allclose(
            s.rate_before_event(h, 15.0), [18.0, 16.5, 15.0, 15.0]
        )

    def test_ramp_ratio_to_12h_prior(self):
        s = Schedule("ramp", delta_pct=20.0, hours=10.0)
        at_event = s.rate_before_event(np.array([0.0]), 20.0)[0]
        at_ref = s.rate_before_event(np.array([12.0]), 20.0)[0]
        assert at_event / at_ref == pytest.approx(1.2)

    def test_step(self):
        s = Schedule("step", delta_pct=50.0, at_hour=6.0)
        np.testing.assert_allclose(
            s.rate_before_event(np.array([7.0, 6.0, 1.0]), 10.0), [10.0, 15.0, 15.0]
        )

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="schedule"):
            Schedule("linear")


class TestSynthCohort:
    def test_shapes_and_determinism(self):
        a = synth_cohort(4, Schedule("flat"), seed=5, duration_h=2.0)
        b = synth_cohort(4, Schedule("flat"), seed=5, duration_h=2.0)
        assert len(a) == 4
        for pa, pb in zip(a, b):
            assert pa.patient_id == pb.patient_id
            assert np.array_equal(pa.minute_times, pb.minute_times)
            assert np.array_equal(pa.minute_rates, pb.minute_rates)

    def test_dropout_within_bounds(self):
        cohort = synth_cohort(20, Schedule("flat"), seed=1, duration_h=10.0)
        for p in cohort:
            kept = len(p.minute_times) / 600.0
            assert 0.6 < kept < 0.95  # 10-30% dropout

    def test_full_dropout_gives_empty_minutes(self):
        cohort = synth_cohort(2, Schedule("flat"), seed=1, duration_h=1.0, dropout=1.0)
        for p in cohort:
            assert len(p.minute_times) == 0

    def test_flat_cohort_rate_stability(self):
        cohort = synth_cohort(10, Schedule("flat"), seed=3, duration_h=6.0, dropout=0.0)
        for p in cohort:
            hourly = p.minute_rates.reshape(6, 60).mean(axis=1)
            ratios = hourly[:, None] / hourly[None, :]
            assert np.all((ratios > 0.95) & (ratios < 1.05))

    def test_truth_passes_label_acceptance(self):
        cohort = synth_cohort(5, Schedule("flat"), seed=2, duration_h=3.0)
        accepted = total = 0
        for p in cohort:
            times, values = p.rr_stream()
            for start in p.minute_times:
                sel = (times >= start) & (times < start + 60)
                label = aggregate_label(values[sel])
                total += 1
                accepted += int(accept_label(label).accepted)
        assert total > 0
        assert accepted / total > 0.99

    def test_event_time_after_all_minutes(self):
        cohort = synth_cohort(3, Schedule("ramp", delta_pct=20.0), seed=8, duration_h=2.0)
        for p in cohort:
            assert p.minute_times.max() < p.event_time.timestamp()

    def test_include_ecg_renders_runs(self):
        cohort = synth_cohort(
            1, Schedule("flat"), seed=4, duration_h=1.0, dropout=0.2, include_ecg=True
        )
        patient = cohort[0]
        assert patient.records
        total_minutes = sum(r.record.n_samples // 7200 for r in patient.records)
        assert total_minutes == len(patient.minute_times)
        # record start times sit on the patient's minute grid
        starts = {r.record.start_time.timestamp() for r in patient.records}
        assert starts <= set(patient.minute_times)
