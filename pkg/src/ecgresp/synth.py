"""Synthetic ECG with programmable respiration modulation.

Ground truth is unavailable from the clinical archives, so training and
cohort analyses at desk scale run on generated data: a Gaussian-wavelet beat
train whose R amplitude, beat interval and baseline all carry a respiration
frequency, paired with an exact RR truth stream at 0.5 Hz.

Morphology is five wavelets per beat (P, Q, R, S, T) at fixed offsets from
the R peak.  Respiration enters three ways:

* amplitude modulation: beat amplitude x (1 + am_depth * sin(phase)),
* sinus arrhythmia: beat interval x (1 - rsa_depth * sin(phase)),
* baseline wander: additive sinusoid at the respiration frequency.

Everything is a pure function of (params, seed); identical seeds give
bit-identical records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from fractions import Fraction

import numpy as np

from .waveform import RecordHeader, SignalInfo, WaveformRecord, physical_to_adu

SYNTH_GAIN = 200.0  # adu per mV in generated records
RR_TRUTH_HZ = 0.5
LEAD_NAMES = ("I", "II", "III", "V")

# (offset_s from R, width_s, amplitude_mV)
BEAT_WAVELETS = (
    (-0.170, 0.025, 0.15),   # P
    (-0.035, 0.010, -0.12),  # Q
    (0.000, 0.012, 1.20),    # R
    (0.035, 0.010, -0.25),   # S
    (0.250, 0.050, 0.35),    # T
)


@dataclass(frozen=True)
class SynthParams:
    heart_rate: float = 75.0
    resp_rate: float = 15.0
    am_depth: float = 0.2
    rsa_depth: float = 0.05
    baseline_wander_mv: float = 0.1
    noise_std_mv: float = 0.05
    lead_gains: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7)
    seed: int = 0

    def __post_init__(self):
        if self.resp_rate <= 0:
            raise ValueError("resp_rate must be positive")
        if self.am_depth < 0 or self.rsa_depth < 0:
            raise ValueError("modulation depths must be nonnegative")


@dataclass
class SynthRecord:
    """A generated waveform record plus its exact RR truth stream."""

    record: WaveformRecord
    rr_times: np.ndarray   # POSIX seconds, 0.5 Hz
    rr_values: np.ndarray  # programmed rate in bpm
    params: SynthParams


@dataclass(frozen=True)
class Schedule:
    """Programmed RR trajectory as a function of hours before the event.

    ``flat`` holds the baseline; ``ramp`` rises linearly over the final
    ``hours`` to baseline x (1 + delta_pct/100); ``step`` jumps to that level
    at ``at_hour`` before the event.
    """

    kind: str = "flat"
    delta_pct: float = 0.0
    hours: float = 10.0
    at_hour: float = 10.0

    def __post_init__(self):
        if self.kind not in ("flat", "ramp", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def rate_before_event(self, hours_before: np.ndarray, baseline_bpm: float) -> np.ndarray:
        h = np.asarray(hours_before, dtype=np.float64)
        if self.kind == "flat":
            return np.full_like(h, baseline_bpm)
        if self.kind == "ramp":
            lift = np.clip((self.hours - h) / self.hours, 0.0, 1.0)
            return baseline_bpm * (1.0 + self.delta_pct / 100.0 * lift)
        # step
        return np.where(
            h <= self.at_hour,
            baseline_bpm * (1.0 + self.delta_pct / 100.0),
            baseline_bpm,
        )


@dataclass
class CohortPatient:
    """One simulated patient: gappy minute-level RR truth toward an event."""

    patient_id: str
    event_time: datetime
    schedule: Schedule
    baseline_bpm: float
    minute_times: np.ndarray    # POSIX seconds of kept minute starts
    minute_rates: np.ndarray    # programmed bpm, constant within each minute
    records: list[SynthRecord] = field(default_factory=list)

    def rr_stream(self) -> tuple[np.ndarray, np.ndarray]:
        """RR truth samples at 0.5 Hz inside the kept minutes."""
        offsets = np.arange(0, 60, 1.0 / RR_TRUTH_HZ)
        times = (self.minute_times[:, None] + offsets[None, :]).ravel()
        values = np.repeat(self.minute_rates, len(offsets))
        return times, values


def _synth_leads(
    params: SynthParams,
    duration_s: float,
    resp_bpm: np.ndarray,
    fs: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Generate the per-lead mV matrix (n_leads, n_samples)."""
    n = int(round(duration_s * fs))
    # respiration phase from the (possibly time-varying) programmed rate
    phase = 2.0 * np.pi * np.cumsum(resp_bpm / 60.0) / fs
    phase -= phase[0]

    base = np.zeros(n, dtype=np.float64)
    t_grid = np.arange(n) / fs

    window_lo, window_hi = -0.30, 0.45  # covers P..T around each R peak
    beat_t = 0.30  # lead-in so the first beat's P wave is complete
    t_beat = beat_t
    base_interval = 60.0 / params.heart_rate
    while t_beat < duration_s + 0.3:
        idx = min(int(t_beat * fs), n - 1)
        mod = np.sin(phase[idx])
        amp = 1.0 + params.am_depth * mod
        lo = max(0, int(np.ceil((t_beat + window_lo) * fs)))
        hi = min(n, int(np.floor((t_beat + window_hi) * fs)) + 1)
        if lo < hi:
            tw = t_grid[lo:hi] - t_beat
            seg = np.zeros(hi - lo, dtype=np.float64)
            for off, width, a in BEAT_WAVELETS:
                seg += a * np.exp(-0.5 * ((tw - off) / width) ** 2)
            base[lo:hi] += amp * seg
        t_beat += base_interval * (1.0 - params.rsa_depth * mod)

    base += params.baseline_wander_mv * np.sin(phase)

    leads = np.empty((len(params.lead_gains), n), dtype=np.float64)
    for i, g in enumerate(params.lead_gains):
        leads[i] = g * base
    if params.noise_std_mv > 0:
        leads += rng.normal(0.0, params.noise_std_mv, size=leads.shape)
    return leads


def synth_ecg(
    params: SynthParams,
    duration_s: float = 60.0,
    start_time: datetime | None = None,
    record_name: str = "synth",
    sample_rate: int = 120,
    resp_profile: np.ndarray | None = None,
) -> SynthRecord:
    """Generate one multi-lead record with matching RR truth.

    ``resp_profile`` optionally gives the programmed rate per output sample
    (bpm); by default the constant ``params.resp_rate`` is used.
    """
    if duration_s < 60:
        raise ValueError("duration must be at least 60 s")
    n = int(round(duration_s * sample_rate))
    if resp_profile is None:
        resp_bpm = np.full(n, params.resp_rate, dtype=np.float64)
    else:
        resp_bpm = np.asarray(resp_profile, dtype=np.float64)
        if resp_bpm.shape != (n,):
            raise ValueError(f"resp_profile must have {n} entries")
        if np.any(resp_bpm <= 0):
            raise ValueError("resp_profile must be positive")
    if start_time is None:
        start_time = datetime(2024, 1, 1, tzinfo=timezone.utc)

    rng = np.random.default_rng(params.seed)
    leads_mv = _synth_leads(params, duration_s, resp_bpm, sample_rate, rng)

    signals = tuple(
        SignalInfo(
            file_name=f"lead{i:02d}.dat",
            format_code=16,
            gain=SYNTH_GAIN,
            baseline=0,
            lead_name=LEAD_NAMES[i % len(LEAD_NAMES)],
        )
        for i in range(leads_mv.shape[0])
    )
    header = RecordHeader(
        record_name=record_name,
        n_signals=leads_mv.shape[0],
        sample_rate=Fraction(sample_rate),
        n_samples=n,
        signals=signals,
    )
    adu = [physical_to_adu(leads_mv[i], SYNTH_GAIN, 0) for i in range(leads_mv.shape[0])]
    record = WaveformRecord(header=header, start_time=start_time, adu=adu)

    step = int(sample_rate / RR_TRUTH_HZ)
    idx = np.arange(0, n, step)
    rr_times = start_time.timestamp() + idx / sample_rate
    rr_values = resp_bpm[idx].copy()
    return SynthRecord(record=record, rr_times=rr_times, rr_values=rr_values, params=params)


def synth_cohort(
    n_patients: int,
    schedule: Schedule,
    seed: int = 0,
    duration_h: float = 37.0,
    dropout: float | tuple[float, float] = (0.10, 0.30),
    baseline_range: tuple[float, float] = (12.0, 28.0),
    jitter_bpm: float = 1.0,
    include_ecg: bool = False,
    ecg_params: SynthParams | None = None,
    event_time: datetime | None = None,
) -> list[CohortPatient]:
    """Simulate a cohort of patients with RR evolving toward an event.

    Per patient: a minute grid covering ``duration_h`` hours before the
    event, a random 10-30 % of minutes dropped (archive gaps), and a
    programmed rate per kept minute equal to the schedule plus uniform
    +/-``jitter_bpm`` jitter.  ``include_ecg`` additionally renders waveform
    records (one per contiguous run of kept minutes); this is slow and meant
    for small cohorts.
    """
    if n_patients < 1:
        raise ValueError("need at least one patient")
    if event_time is None:
        event_time = datetime(2024, 3, 1, 12, 0, tzinfo=timezone.utc)

    root = np.random.SeedSequence(seed)
    out = []
    for p, child in enumerate(root.spawn(n_patients)):
        rng = np.random.default_rng(child)
        baseline = rng.uniform(*baseline_range)
        p_drop = dropout if np.isscalar(dropout) else rng.uniform(*dropout)

        n_minutes = int(round(duration_h * 60))
        # minute k starts (n_minutes - k) minutes before the event
        hours_before = (np.arange(n_minutes, 0, -1) - 0.5) / 60.0
        rates = schedule.rate_before_event(hours_before, baseline)
        rates = rates + rng.uniform(-jitter_bpm, jitter_bpm, size=n_minutes)
        keep = rng.random(n_minutes) >= p_drop

        t0 = event_time - timedelta(minutes=n_minutes)
        minute_times = t0.timestamp() + 60.0 * np.arange(n_minutes)
        patient = CohortPatient(
            patient_id=f"sim{p:05d}",
            event_time=event_time,
            schedule=schedule,
            baseline_bpm=baseline,
            minute_times=minute_times[keep],
            minute_rates=rates[keep],
        )

        if include_ecg:
            params = ecg_params or SynthParams()
            patient.records = _render_runs(patient, keep, minute_times, rates, t0, params, p)
        out.append(patient)
    return out


def _render_runs(
    patient: CohortPatient,
    keep: np.ndarray,
    minute_times: np.ndarray,
    rates: np.ndarray,
    t0: datetime,
    params: SynthParams,
    patient_index: int,
) -> list[SynthRecord]:
    """One waveform record per contiguous run of kept minutes."""
    records = []
    n = len(keep)
    i = 0
    run_id = 0
    while i < n:
        if not keep[i]:
            i += 1
            continue
        j = i
        while j < n and keep[j]:
            j += 1
        run_minutes = j - i
        fs = 120
        profile = np.repeat(rates[i:j], 60 * fs)
        run_params = SynthParams(
            heart_rate=params.heart_rate,
            resp_rate=float(rates[i]),
            am_depth=params.am_depth,
            rsa_depth=params.rsa_depth,
            baseline_wander_mv=params.baseline_wander_mv,
            noise_std_mv=params.noise_std_mv,
            lead_gains=params.lead_gains,
            seed=params.seed + 100_003 * patient_index + run_id,
        )
        records.append(
            synth_ecg(
                run_params,
                duration_s=60.0 * run_minutes,
                start_time=t0 + timedelta(minutes=i),
                record_name=f"{patient.patient_id}-r{run_id:03d}",
                resp_profile=profile,
            )
        )
        run_id += 1
        i = j
    return records
