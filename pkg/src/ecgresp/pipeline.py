"""Glue between records, curation and trainable arrays.

These helpers run the full curation path (masking, minute extraction, label
acceptance, alignment) and flatten the surviving examples into the arrays
the estimator consumes.  They also build the synthetic end-to-end dataset
used for desk-scale training runs.
"""

from __future__ import annotations

import numpy as np

from . import curation
from .curation import MinuteExample, MINUTE_SAMPLES
from .evalstats import RrTimeline
from .synth import SynthParams, synth_ecg
from .waveform import WaveformRecord


def curate_record(
    record: WaveformRecord,
    rr_times: np.ndarray,
    rr_values: np.ndarray,
    patient_id: str | None = None,
    source: str = "synthetic",
    rejection_log: list | None = None,
    accept_fn=None,
) -> list[MinuteExample]:
    """Run one record through masking, extraction and label alignment."""
    for lead in range(record.n_leads):
        sig = record.header.signals[lead]
        phys = (record.adu[lead].astype(np.float64) - sig.baseline) / sig.gain
        record.mask[lead] = curation.remove_out_of_range(phys, record.mask[lead])
    minutes = []
    for lead in range(record.n_leads):
        minutes.extend(curation.extract_minutes(record, lead, patient_id=patient_id))
    kwargs = {} if accept_fn is None else {"accept_fn": accept_fn}
    return curation.align(
        minutes, rr_times, rr_values, source=source, rejection_log=rejection_log, **kwargs
    )


def examples_to_arrays(
    examples: list[MinuteExample],
) -> tuple[np.ndarray, np.ndarray, list[str], list[str]]:
    """Stack examples into (X, y, patient_ids, sources); X is raw mV float32."""
    n = len(examples)
    X = np.empty((n, MINUTE_SAMPLES), dtype=np.float32)
    y = np.empty(n, dtype=np.float64)
    patients, sources = [], []
    for i, ex in enumerate(examples):
        X[i] = ex.ecg.samples
        y[i] = ex.label
        patients.append(ex.patient_id)
        sources.append(ex.source)
    return X, y, patients, sources


def make_minute_dataset(
    n_patients: int,
    minutes_per_patient: int,
    rr_lo: float = 10.0,
    rr_hi: float = 30.0,
    heart_rate_range: tuple[float, float] = (60.0, 90.0),
    am_depth: float = 0.2,
    rsa_depth: float = 0.05,
    noise_std_mv: float = 0.05,
    n_leads: int = 1,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Synthesize a labeled minute dataset through the real curation path.

    Each patient gets one record with a constant programmed RR drawn
    uniformly from [rr_lo, rr_hi]; all minutes pass the acceptance rules by
    construction, so the output holds n_patients * minutes_per_patient rows.
    """
    root = np.random.SeedSequence(seed)
    X_parts, y_parts, patients = [], [], []
    gains = tuple(1.0 - 0.1 * i for i in range(n_leads))
    for p, child in enumerate(root.spawn(n_patients)):
        rng = np.random.default_rng(child)
        rr = float(rng.uniform(rr_lo, rr_hi))
        hr = float(rng.uniform(*heart_rate_range))
        params = SynthParams(
            heart_rate=hr,
            resp_rate=rr,
            am_depth=am_depth,
            rsa_depth=rsa_depth,
            noise_std_mv=noise_std_mv,
            lead_gains=gains,
            seed=int(rng.integers(0, 2**31)),
        )
        pid = f"synth{p:05d}"
        rec = synth_ecg(params, duration_s=60.0 * minutes_per_patient, record_name=pid)
        examples = curate_record(
            rec.record, rec.rr_times, rec.rr_values, patient_id=pid, source="synthetic"
        )
        for ex in examples:
            X_parts.append(ex.ecg.samples.astype(np.float32))
            y_parts.append(ex.label)
            patients.append(pid)
    X = np.stack(X_parts) if X_parts else np.zeros((0, MINUTE_SAMPLES), dtype=np.float32)
    return X, np.asarray(y_parts, dtype=np.float64), patients


def split_arrays(
    X: np.ndarray,
    y: np.ndarray,
    patients: list[str],
    fractions: tuple[float, float, float] = curation.SPLIT_FRACTIONS,
    seed: int = 0,
) -> dict[str, tuple[np.ndarray, np.ndarray, list[str]]]:
    """Patient-disjoint train/tune/test views of a flat dataset."""
    unique = set(patients)
    if len(unique) == 1:
        assignment = {p: "train" for p in unique}
    else:
        assignment = {p: curation.assign_split(p, seed, fractions) for p in unique}
    out = {}
    tags = np.asarray([assignment[p] for p in patients])
    for name in curation.SPLIT_NAMES:
        sel = tags == name
        out[name] = (X[sel], y[sel], [p for p, s in zip(patients, sel) if s])
    return out


def group_minutes_by_lead(record_minutes: list) -> dict[str, list]:
    """Arrange curated EcgMinutes by lead name for timeline annotation."""
    by_lead: dict[str, list] = {}
    for m in record_minutes:
        by_lead.setdefault(m.lead_name, []).append(m)
    return by_lead


def cohort_truth_timeline(
    minute_times: np.ndarray, minute_rates: np.ndarray, patient_id: str
) -> RrTimeline:
    """RR timeline straight from simulation truth (no model in the loop)."""
    return RrTimeline(
        patient_id=patient_id,
        minute_times=np.asarray(minute_times, dtype=np.float64),
        values=np.asarray(minute_rates, dtype=np.float64),
    )
