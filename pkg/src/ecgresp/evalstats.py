"""Technical validation: error metrics, histograms and longitudinal timelines.

Histograms follow the display conventions used throughout: integer 1-bpm
bins, the prediction-vs-label density clamped to [10, 50] with out-of-range
counts reported separately, and log10(count+1) display values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .curation import detect_flat, znormalize
from .nn.model import Model, predict as nn_predict

HIST_LO = 10
HIST_HI = 50
N_BINS = HIST_HI - HIST_LO  # 1-bpm bins

LEAD_PRIORITY = ("II", "I", "III", "V")
ROLLING_WINDOW_MIN = 15
ROLLING_MIN_OCCUPANCY = 0.5


def mae(preds: np.ndarray, labels: np.ndarray) -> float:
    """Mean absolute error in bpm."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(preds - labels)))


def r2(preds: np.ndarray, labels: np.ndarray) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot about the label mean."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("empty input")
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("labels are all equal; R2 undefined")
    ss_res = float(np.sum((preds - labels) ** 2))
    return 1.0 - ss_res / ss_tot


def density_histogram(preds: np.ndarray, labels: np.ndarray) -> dict:
    """2D (label_bin, pred_bin) counts over [10, 50] plus log display values.

    Values outside the range are clamped into the edge bins; how many were
    clamped is reported as ``n_out_of_range``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    out_of_range = int(
        np.sum((preds < HIST_LO) | (preds >= HIST_HI) | (labels < HIST_LO) | (labels >= HIST_HI))
    )
    li = np.clip(np.floor(labels - HIST_LO), 0, N_BINS - 1).astype(int)
    pi = np.clip(np.floor(preds - HIST_LO), 0, N_BINS - 1).astype(int)
    counts = np.zeros((N_BINS, N_BINS), dtype=np.int64)
    np.add.at(counts, (li, pi), 1)
    return {
        "counts": counts,
        "display": np.log10(counts + 1.0),
        "bin_edges": np.arange(HIST_LO, HIST_HI + 1),
        "n_out_of_range": out_of_range,
    }


def rr_histogram(values: np.ndarray, source_tag: str = "") -> dict[int, int]:
    """Integer-bin counts: bin k covers [k, k+1)."""
    values = np.asarray(values, dtype=np.float64)
    out: dict[int, int] = {}
    for k in np.floor(values).astype(int):
        out[int(k)] = out.get(int(k), 0) + 1
    return out


@dataclass
class EvalReport:
    n_examples: int
    mae_bpm: float
    r2: float
    per_source: dict[str, dict] = field(default_factory=dict)
    histogram: dict | None = None

    def to_json(self) -> str:
        payload = {
            "n_examples": self.n_examples,
            "mae_bpm": self.mae_bpm,
            "r2": self.r2,
            "per_source": self.per_source,
        }
        if self.histogram is not None:
            payload["n_out_of_range"] = self.histogram["n_out_of_range"]
        return json.dumps(payload, indent=2)


def evaluate(preds: np.ndarray, labels: np.ndarray, sources: list[str] | None = None) -> EvalReport:
    """Assemble the full technical report for one prediction set."""
    report = EvalReport(
        n_examples=len(preds),
        mae_bpm=mae(preds, labels),
        r2=r2(preds, labels),
        histogram=density_histogram(preds, labels),
    )
    if sources is not None:
        preds = np.asarray(preds)
        labels = np.asarray(labels)
        tags = np.asarray(sources)
        for tag in sorted(set(sources)):
            sel = tags == tag
            report.per_source[tag] = {
                "n": int(sel.sum()),
                "mae_bpm": mae(preds[sel], labels[sel]),
                "r2": r2(preds[sel], labels[sel]) if len(set(labels[sel])) > 1 else None,
            }
    return report


def write_histogram_csv(hist: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label_bin", "pred_bin", "count"])
        counts = hist["counts"]
        for i in range(counts.shape[0]):
            for j in range(counts.shape[1]):
                if counts[i, j]:
                    writer.writerow([HIST_LO + i, HIST_LO + j, int(counts[i, j])])


# ---------------------------------------------------------------------------
# Longitudinal annotation
# ---------------------------------------------------------------------------


@dataclass
class RrTimeline:
    """Minute-indexed RR predictions for one patient, with gaps.

    ``minute_times`` are POSIX seconds of minute starts, strictly increasing.
    The rolling average is a centered 15-minute mean, defined only where at
    least half the window's minutes are present.
    """

    patient_id: str
    minute_times: np.ndarray
    values: np.ndarray
    labels: np.ndarray | None = None  # concurrent reference RR, NaN where absent
    rolling: np.ndarray | None = None

    def __post_init__(self):
        self.minute_times = np.asarray(self.minute_times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.minute_times) <= 0):
            raise ValueError("timeline timestamps must be strictly increasing")
        if self.rolling is None:
            self.rolling = rolling_average(self.minute_times, self.values)

    def __len__(self):
        return len(self.minute_times)


def rolling_average(
    minute_times: np.ndarray,
    values: np.ndarray,
    window_min: int = ROLLING_WINDOW_MIN,
    min_occupancy: float = ROLLING_MIN_OCCUPANCY,
) -> np.ndarray:
    """Centered windowed mean over available minutes; NaN below occupancy."""
    times = np.asarray(minute_times, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    half = (window_min - 1) // 2 * 60.0
    out = np.full_like(vals, np.nan)
    lo = np.searchsorted(times, times - half, side="left")
    hi = np.searchsorted(times, times + half, side="right")
    need = int(np.ceil(window_min * min_occupancy))
    for i in range(len(times)):
        if hi[i] - lo[i] >= need:
            out[i] = vals[lo[i] : hi[i]].mean()
    return out


def annotate_timeline(
    model: Model,
    minutes_by_lead: dict[str, list],
    patient_id: str,
    lead_priority: tuple[str, ...] = LEAD_PRIORITY,
    labels_by_minute: dict[float, float] | None = None,
) -> RrTimeline:
    """Predict one RR value per available minute for one patient.

    ``minutes_by_lead`` maps lead name to curated ``EcgMinute`` lists.  For
    each minute the first lead in priority order with a clean (non-flat)
    segment is used; remaining lead names fall back to name order.
    """
    by_minute: dict[float, dict[str, np.ndarray]] = {}
    for lead, minutes in minutes_by_lead.items():
        for m in minutes:
            by_minute.setdefault(m.start_time.timestamp(), {})[lead] = m.samples

    starts = sorted(by_minute)
    chosen = []
    times = []
    for t in starts:
        leads = by_minute[t]
        ordered = [l for l in lead_priority if l in leads]
        ordered += sorted(set(leads) - set(lead_priority))
        pick = next((l for l in ordered if not detect_flat(leads[l])), None)
        if pick is None:
            continue
        chosen.append(znormalize(leads[pick]))
        times.append(t)

    if not times:
        return RrTimeline(patient_id=patient_id, minute_times=np.zeros(0), values=np.zeros(0))

    preds = nn_predict(model, np.stack(chosen))
    labels = None
    if labels_by_minute is not None:
        labels = np.array([labels_by_minute.get(t, np.nan) for t in times])
    return RrTimeline(
        patient_id=patient_id,
        minute_times=np.array(times),
        values=preds,
        labels=labels,
    )


def write_timeline_csv(timeline: RrTimeline, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["minute_iso", "pred_bpm", "label_bpm", "rolling_bpm"])
        for i, t in enumerate(timeline.minute_times):
            iso = datetime.fromtimestamp(t, tz=timezone.utc).isoformat()
            label = "" if timeline.labels is None or np.isnan(timeline.labels[i]) else repr(float(timeline.labels[i]))
            roll = "" if np.isnan(timeline.rolling[i]) else repr(float(timeline.rolling[i]))
            writer.writerow([iso, repr(float(timeline.values[i])), label, roll])
