"""Dataset curation: ECG minute selection, label acceptance and patient splits.

The pipeline turns waveform records plus a concurrent respiratory-rate sample
stream into ``MinuteExample`` items: one clean 60 s single-lead ECG segment
(7200 samples at 120 Hz) paired with the minute-averaged RR label.

Filter rules, applied in order:

* samples beyond +/-60 mV are masked,
* only minutes with zero masked samples survive (contiguity),
* flat minutes (peak-to-peak under 0.01 mV) are dropped,
* RR labels are accepted iff min > 0 bpm, mean within [10, 50] bpm,
  max - min < 10 bpm and population std < 2 bpm.

Splits are stratified by patient: every example of a patient lands in the
same split, decided by a seeded hash of the patient id alone.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .waveform import WaveformRecord

TARGET_RATE_HZ = 120
MINUTE_SAMPLES = 60 * TARGET_RATE_HZ  # 7200
AMPLITUDE_LIMIT_MV = 60.0
FLAT_RANGE_MV = 0.01
ANTIALIAS_CUTOFF_HZ = 0.45 * TARGET_RATE_HZ  # 54 Hz

LABEL_MIN_BPM = 10.0
LABEL_MAX_BPM = 50.0
LABEL_SPREAD_BPM = 10.0
LABEL_STD_BPM = 2.0

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "tune", "test")


class CurationError(ValueError):
    pass


@dataclass
class EcgMinute:
    """One contiguous, clean, 60 s single-lead segment at 120 Hz (raw mV)."""

    patient_id: str
    lead_name: str
    start_time: datetime
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (MINUTE_SAMPLES,):
            raise CurationError(
                f"minute must hold exactly {MINUTE_SAMPLES} samples, got {self.samples.shape}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise CurationError("minute contains non-finite samples")
        if np.max(np.abs(self.samples)) > AMPLITUDE_LIMIT_MV:
            raise CurationError(f"minute exceeds +/-{AMPLITUDE_LIMIT_MV} mV")
        if detect_flat(self.samples):
            raise CurationError("minute is flat")


@dataclass(frozen=True)
class MinuteLabel:
    """Summary of the RR samples inside one minute."""

    mean_rr: float
    min_rr: float
    max_rr: float
    std_rr: float
    n_samples: int
    source: str = "ImP"

    def __post_init__(self):
        if self.n_samples <= 0:
            raise CurationError("label needs at least one RR sample")
        tol = 1e-9 * max(1.0, abs(self.mean_rr))  # summation round-off slack
        if self.mean_rr < self.min_rr - tol or self.mean_rr > self.max_rr + tol:
            raise CurationError("label min/mean/max out of order")
        if self.std_rr < 0:
            raise CurationError("negative std")


@dataclass(frozen=True)
class LabelDecision:
    accepted: bool
    reason: str | None = None


@dataclass
class MinuteExample:
    """A curated (ECG minute, RR label) pair; ECG is z-normalized on consumption."""

    ecg: EcgMinute
    label: float
    source: str = "ImP"

    @property
    def patient_id(self) -> str:
        return self.ecg.patient_id

    def normalized(self) -> np.ndarray:
        return znormalize(self.ecg.samples)


@dataclass
class DatasetSplit:
    name: str
    examples: list[MinuteExample] = field(default_factory=list)

    @property
    def patient_ids(self) -> set[str]:
        return {ex.patient_id for ex in self.examples}


# ---------------------------------------------------------------------------
# Sample-level filters
# ---------------------------------------------------------------------------


def remove_out_of_range(
    samples_mv: np.ndarray, mask: np.ndarray, limit_mv: float = AMPLITUDE_LIMIT_MV
) -> np.ndarray:
    """Mask every sample strictly beyond the amplitude limit; old bits kept."""
    samples_mv = np.asarray(samples_mv, dtype=np.float64)
    out = np.asarray(mask, dtype=bool).copy()
    live = ~out
    out[live] |= np.abs(samples_mv[live]) > limit_mv
    return out


def detect_flat(minute_samples: np.ndarray, threshold_mv: float = FLAT_RANGE_MV) -> bool:
    """True iff peak-to-peak range over the minute is below 0.01 mV."""
    x = np.asarray(minute_samples, dtype=np.float64)
    return bool(np.max(x) - np.min(x) < threshold_mv)


def resample_to_120hz(samples: np.ndarray, src_rate: Fraction | float | int) -> np.ndarray:
    """Downsample a contiguous run to 120 Hz.

    Integer decimation ratios get a zero-phase anti-alias low-pass (cutoff
    54 Hz) followed by sample picking; other ratios get the same low-pass
    then linear interpolation at the target instants.  A 120 Hz input passes
    through bit-exactly.
    """
    src = Fraction(src_rate).limit_denominator(10**6) if not isinstance(src_rate, Fraction) else src_rate
    if src < TARGET_RATE_HZ:
        raise CurationError(f"upsampling unsupported (source rate {float(src)} Hz)")
    x = np.asarray(samples, dtype=np.float64)
    if src == TARGET_RATE_HZ:
        return x

    n = len(x)
    # output length = round(duration_s * 120), half-up for determinism
    m = int(Fraction(n) * TARGET_RATE_HZ / src + Fraction(1, 2))
    if m < 1:
        return x[:0]

    nyq = float(src) / 2.0
    b, a = sps.butter(4, ANTIALIAS_CUTOFF_HZ / nyq)
    padlen = min(3 * max(len(a), len(b)), n - 1)
    low = sps.filtfilt(b, a, x, padlen=padlen)

    ratio = src / TARGET_RATE_HZ
    if ratio.denominator == 1:
        return low[:: ratio.numerator][:m]
    idx = np.arange(m) * (float(src) / TARGET_RATE_HZ)
    return np.interp(idx, np.arange(n), low)


def znormalize(segment: np.ndarray) -> np.ndarray:
    """Subtract the mean and divide by the population standard deviation."""
    x = np.asarray(segment, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if sd == 0:
        raise CurationError("flat segment reached normalization")
    return (x - mu) / sd


def znormalize_batch(segments: np.ndarray) -> np.ndarray:
    """Row-wise :func:`znormalize` for a (n, length) array."""
    x = np.asarray(segments, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    if np.any(sd == 0):
        raise CurationError("flat segment reached normalization")
    return (x - mu) / sd


# ---------------------------------------------------------------------------
# Minute extraction
# ---------------------------------------------------------------------------


def extract_minutes(
    record: WaveformRecord, lead: int, patient_id: str | None = None
) -> list[EcgMinute]:
    """Emit clean non-overlapping minutes of one lead, on the record's grid.

    The lead mask must already include out-of-range removals.  Minutes with
    any masked sample are dropped; surviving windows are resampled to 120 Hz
    and checked for flatness and amplitude.
    """
    if patient_id is None:
        patient_id = record.header.record_name
    src = record.sample_rate
    sig = record.header.signals[lead]
    adu = record.adu[lead]
    mask = record.mask[lead]
    phys = (adu.astype(np.float64) - sig.baseline) / sig.gain

    n = len(adu)
    per_minute = 60 * src  # samples per minute, exact rational
    n_minutes = int(Fraction(n) / per_minute)  # only full minutes
    out = []
    for k in range(n_minutes):
        lo = int(k * per_minute)
        hi = int((k + 1) * per_minute)
        if mask[lo:hi].any():
            continue
        seg = resample_to_120hz(phys[lo:hi], src)
        if len(seg) != MINUTE_SAMPLES:
            continue
        if detect_flat(seg) or np.max(np.abs(seg)) > AMPLITUDE_LIMIT_MV:
            continue
        out.append(
            EcgMinute(
                patient_id=patient_id,
                lead_name=sig.lead_name,
                start_time=record.start_time + timedelta(seconds=60 * k),
                samples=seg,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def aggregate_label(rr_values: np.ndarray, source: str = "ImP") -> MinuteLabel | None:
    """Summarize the RR samples of one minute; None when the window is empty.

    The std is the population standard deviation.
    """
    vals = np.asarray(rr_values, dtype=np.float64)
    if vals.size == 0:
        return None
    return MinuteLabel(
        mean_rr=float(vals.mean()),
        min_rr=float(vals.min()),
        max_rr=float(vals.max()),
        std_rr=float(vals.std()),
        n_samples=int(vals.size),
        source=source,
    )


def accept_label(
    label: MinuteLabel,
    min_bpm: float = LABEL_MIN_BPM,
    max_bpm: float = LABEL_MAX_BPM,
    spread_bpm: float = LABEL_SPREAD_BPM,
    std_bpm: float = LABEL_STD_BPM,
) -> LabelDecision:
    """Apply the RR acceptance rules, reporting the first failing one.

    Order: minimum positivity, mean range, min-max spread, std.  Boundary
    semantics: min strictly > 0; mean inclusive in [10, 50]; spread strictly
    < 10; std strictly < 2.
    """
    if not label.min_rr > 0:
        return LabelDecision(False, "min_nonpositive")
    if not (min_bpm <= label.mean_rr <= max_bpm):
        return LabelDecision(False, "mean_range")
    if not (label.max_rr - label.min_rr < spread_bpm):
        return LabelDecision(False, "spread")
    if not (label.std_rr < std_bpm):
        return LabelDecision(False, "std")
    return LabelDecision(True)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def align(
    ecg_minutes: list[EcgMinute],
    rr_times: np.ndarray,
    rr_values: np.ndarray,
    source: str = "ImP",
    rejection_log: list | None = None,
    accept_fn=None,
) -> list[MinuteExample]:
    """Pair clean ECG minutes with accepted minute labels.

    ``rr_times`` are absolute timestamps (same clock as the ECG records),
    given as POSIX seconds or datetimes.  One example is emitted per clean
    lead of each accepted minute, all sharing the minute label.  When the two
    streams do not overlap at all a warning is issued and nothing is emitted.
    ``accept_fn`` substitutes a custom acceptance rule (default paper rules).
    """
    if accept_fn is None:
        accept_fn = accept_label
    if len(ecg_minutes) == 0:
        return []
    times = np.asarray(
        [t.timestamp() if isinstance(t, datetime) else float(t) for t in np.asarray(rr_times).ravel()]
    )
    values = np.asarray(rr_values, dtype=np.float64).ravel()
    if times.shape != values.shape:
        raise CurationError("rr_times and rr_values must have equal lengths")
    order = np.argsort(times, kind="stable")
    times, values = times[order], values[order]

    minute_starts = sorted({m.start_time for m in ecg_minutes})
    if times.size == 0 or times[-1] < minute_starts[0].timestamp() or times[0] >= minute_starts[-1].timestamp() + 60:
        warnings.warn("ECG and RR streams do not overlap; check clocks", stacklevel=2)
        return []

    by_start: dict[datetime, list[EcgMinute]] = {}
    for m in ecg_minutes:
        by_start.setdefault(m.start_time, []).append(m)

    out = []
    for start in minute_starts:
        t0 = start.timestamp()
        lo = np.searchsorted(times, t0, side="left")
        hi = np.searchsorted(times, t0 + 60.0, side="left")
        label = aggregate_label(values[lo:hi], source=source)
        if label is None:
            continue
        decision = accept_fn(label)
        if not decision.accepted:
            if rejection_log is not None:
                rejection_log.append((start, decision.reason))
            continue
        for minute in sorted(by_start[start], key=lambda m: m.lead_name):
            out.append(MinuteExample(ecg=minute, label=label.mean_rr, source=source))
    return out


# ---------------------------------------------------------------------------
# Patient-level splits
# ---------------------------------------------------------------------------


def assign_split(
    patient_id: str,
    seed: int,
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS,
) -> str:
    """Deterministic split assignment from (patient_id, seed) alone."""
    digest = hashlib.sha256(f"{seed}|{patient_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    edge = 0.0
    for name, frac in zip(SPLIT_NAMES, fractions):
        edge += frac
        if u < edge:
            return name
    return SPLIT_NAMES[-1]


def split_by_patient(
    examples: list[MinuteExample],
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS,
    seed: int = 0,
) -> dict[str, DatasetSplit]:
    """Partition examples into patient-disjoint train/tune/test splits."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CurationError(f"fractions must sum to 1, got {fractions}")
    patients = {ex.patient_id for ex in examples}
    if len(patients) == 1:
        warnings.warn("single-patient input: everything goes to train", stacklevel=2)
        assignment = {p: "train" for p in patients}
    else:
        assignment = {p: assign_split(p, seed, fractions) for p in patients}
    splits = {name: DatasetSplit(name=name) for name in SPLIT_NAMES}
    for ex in examples:
        splits[assignment[ex.patient_id]].examples.append(ex)
    return splits


# ---------------------------------------------------------------------------
# Tabular outputs
# ---------------------------------------------------------------------------


def write_manifest(splits: dict[str, DatasetSplit], path: str | Path) -> None:
    """One CSV row per example: patient, lead, time, label, source, split."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "lead", "start_time_iso", "label_bpm", "source", "split"])
        for name in SPLIT_NAMES:
            for ex in splits[name].examples:
                writer.writerow(
                    [
                        ex.patient_id,
                        ex.ecg.lead_name,
                        ex.ecg.start_time.isoformat(),
                        repr(ex.label),
                        ex.source,
                        name,
                    ]
                )


def write_rejection_log(rejections: list[tuple[datetime, str]], path: str | Path) -> None:
    """CSV of rejected minutes: minute timestamp and the first failing rule."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["minute_iso", "reason_code"])
        for start, reason in rejections:
            writer.writerow([start.isoformat(), reason])
