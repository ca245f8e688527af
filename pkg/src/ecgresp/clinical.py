"""Clinical cohort assembly and pre-event respiratory dynamics.

The analysis pipeline: intubation events are timestamped from chart and
machine data (minus a 5-minute grace period), each patient's RR timeline is
gathered into hour-long bins before the event (a bin needs more than 20
usable minutes), every bin is normalized by the bin a fixed offset earlier
(12 hours by default), and the per-hour ratio populations are tested either
against 1.0 (single cohort) or against a matched control cohort (Welch).

The t machinery is self-contained: tail probabilities go through the
regularized incomplete beta function evaluated by continued fraction.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .evalstats import RrTimeline

GRACE_PERIOD_MIN = 5
MACHINE_LOOKBACK_MIN = 60
BIN_MIN_MINUTES = 20      # a bin needs strictly more minutes than this
DEFAULT_REF_OFFSET_H = 12
DEFAULT_HORIZON_H = 36
CONTROL_RATIO = 5

NONINVASIVE_KEYS = frozenset(
    {"None_(Room_air)", "Nasal_cannula", "Aerosol_mask", "Face_tent", "Room_air"}
)
VENTILATOR_KEY = "Ventilator"

STAR_THRESHOLDS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


class StatsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Student-t tail probabilities
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    MAXIT, EPS, FPMIN = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            return h
    raise StatsError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise StatsError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper-tail probability P(T > t) for Student's t with ``df`` degrees."""
    if df <= 0:
        raise StatsError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, x)
    return tail if t > 0 else 1.0 - tail


def p_to_stars(p: float) -> str:
    for threshold, stars in STAR_THRESHOLDS:
        if p < threshold:
            return stars
    return ""


@dataclass(frozen=True)
class TestResult:
    t: float
    df: float
    p: float
    stars: str


def one_sample_ttest(values: np.ndarray, mu: float = 1.0) -> TestResult | None:
    """Two-sided one-sample t-test; None when n < 2 or the variance is zero."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        return None
    s = x.std(ddof=1)
    if s == 0:
        return None
    t = (x.mean() - mu) / (s / math.sqrt(n))
    df = n - 1
    p = 2.0 * student_t_sf(abs(t), df)
    return TestResult(t=float(t), df=float(df), p=float(p), stars=p_to_stars(p))


def welch_ttest(a: np.ndarray, b: np.ndarray) -> TestResult | None:
    """Two-sided unequal-variance two-sample t-test (Welch-Satterthwaite df)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        return None
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        return None
    se2 = va / na + vb / nb
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * student_t_sf(abs(t), df)
    return TestResult(t=float(t), df=float(df), p=float(p), stars=p_to_stars(p))


# ---------------------------------------------------------------------------
# Event detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClinicalEvent:
    patient_id: str
    event_time: datetime  # after backward adjustment and grace subtraction
    kind: str = "rapid_response_intubation"
    location: str = "ICU"


@dataclass(frozen=True)
class BloodGas:
    pH: float | None
    pO2: float | None
    pCO2: float | None
    draw_time: datetime | None = None


def detect_intubation(
    patient_id: str,
    chart: list[tuple[datetime, str]],
    machine_times: list[datetime] | None = None,
    noninvasive_keys: frozenset[str] = NONINVASIVE_KEYS,
    kind: str = "rapid_response_intubation",
    location: str = "ICU",
) -> ClinicalEvent | None:
    """Timestamp an intubation from the oxygen-device chart series.

    The event anchor is the first transition from a non-invasive key to
    ``Ventilator``, pulled back to the earliest machine ventilator setting
    (vent_rate / set_tv) in the preceding hour when one exists, then shifted
    5 minutes earlier as a grace period.
    """
    chart = sorted(chart, key=lambda kv: kv[0])
    transition = None
    for (t_prev, v_prev), (t_cur, v_cur) in zip(chart, chart[1:]):
        if v_prev in noninvasive_keys and v_cur == VENTILATOR_KEY:
            transition = t_cur
            break
    if transition is None:
        return None

    anchor = transition
    if machine_times:
        window_lo = transition - timedelta(minutes=MACHINE_LOOKBACK_MIN)
        in_window = [t for t in machine_times if window_lo <= t <= transition]
        if in_window:
            anchor = min(in_window)
    event_time = anchor - timedelta(minutes=GRACE_PERIOD_MIN)
    return ClinicalEvent(patient_id=patient_id, event_time=event_time, kind=kind, location=location)


def resp_failure(bg: BloodGas) -> bool | None:
    """Blood-gas respiratory-failure flag; None when any value is missing.

    True iff pO2 < 100 mmHg, pCO2 > 50 mmHg or pH < 7.3 (all strict).
    """
    if bg.pH is None or bg.pO2 is None or bg.pCO2 is None:
        return None
    return bg.pO2 < 100.0 or bg.pCO2 > 50.0 or bg.pH < 7.3


# ---------------------------------------------------------------------------
# Hourly binning and ratios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HourlyBin:
    lead_time_h: int
    mean_rr: float | None
    n_minutes: int


def hourly_bins(
    timeline: RrTimeline,
    event_time: datetime,
    horizon_h: int = DEFAULT_HORIZON_H,
    min_minutes: int = BIN_MIN_MINUTES,
) -> list[HourlyBin]:
    """Average the timeline into lead-time bins before the event.

    Bin t covers [event - t hours, event - (t-1) hours); its mean is emitted
    only when strictly more than ``min_minutes`` minutes are available.
    """
    t_event = event_time.timestamp()
    times = timeline.minute_times
    vals = timeline.values
    out = []
    for t in range(1, horizon_h + 1):
        lo = t_event - t * 3600.0
        hi = lo + 3600.0
        i = np.searchsorted(times, lo, side="left")
        j = np.searchsorted(times, hi, side="left")
        n = int(j - i)
        mean = float(vals[i:j].mean()) if n > min_minutes else None
        out.append(HourlyBin(lead_time_h=t, mean_rr=mean, n_minutes=n))
    return out


def baseline_ratios(
    bins: list[HourlyBin], ref_offset_h: int = DEFAULT_REF_OFFSET_H
) -> dict[int, float]:
    """ratio(t) = mean(t) / mean(t + offset); present only when both bins are."""
    by_lead = {b.lead_time_h: b for b in bins}
    out = {}
    for t, b in by_lead.items():
        ref = by_lead.get(t + ref_offset_h)
        if b.mean_rr is not None and ref is not None and ref.mean_rr is not None:
            out[t] = b.mean_rr / ref.mean_rr
    return out


# ---------------------------------------------------------------------------
# Extreme trajectories
# ---------------------------------------------------------------------------


def select_extreme_trajectories(
    hourly_means_by_patient: dict[str, dict[int, float]],
    window_h: int = 24,
    low_threshold_bpm: float = 18.0,
    rise_threshold_bpm: float = 14.0,
) -> dict[str, list[str]]:
    """Pick out the flat-low and fast-rising trajectories of a cohort.

    ``persistently_low``: every present hourly mean inside the window is
    under the threshold.  ``rapid_rise``: some later hour exceeds an earlier
    hour by more than the rise threshold (later-max minus earlier-min).
    """
    low, rise = [], []
    for pid, means in hourly_means_by_patient.items():
        in_window = [(t, v) for t, v in means.items() if 1 <= t <= window_h]
        if not in_window:
            continue
        values = [v for _, v in in_window]
        if all(v < low_threshold_bpm for v in values):
            low.append(pid)
        # chronological order = decreasing lead time
        chron = [v for _, v in sorted(in_window, key=lambda kv: -kv[0])]
        running_min = chron[0]
        best_rise = 0.0
        for v in chron[1:]:
            best_rise = max(best_rise, v - running_min)
            running_min = min(running_min, v)
        if best_rise > rise_threshold_bpm:
            rise.append(pid)
    return {"persistently_low": sorted(low), "rapid_rise": sorted(rise)}


# ---------------------------------------------------------------------------
# Control matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlCandidate:
    patient_id: str
    surgery_end: datetime
    telemetry_start: datetime
    telemetry_end: datetime


@dataclass(frozen=True)
class MatchedControl:
    patient_id: str
    pseudo_event_time: datetime
    case_patient_id: str


def match_controls(
    cases: list[tuple[ClinicalEvent, datetime]],
    pool: list[ControlCandidate],
    ratio: int = CONTROL_RATIO,
    seed: int = 0,
    horizon_h: int = DEFAULT_HORIZON_H,
) -> list[MatchedControl]:
    """Sample controls matched on time elapsed since surgery.

    Each case contributes its elapsed time (event minus surgery end); an
    eligible control's telemetry must cover the analysis window ending at
    its own surgery end plus that elapsed time.  Controls are drawn without
    replacement per case, seeded; a shortfall produces a warning and a
    partial match.
    """
    case_ids = {ev.patient_id for ev, _ in cases}
    if case_ids & {c.patient_id for c in pool}:
        raise StatsError("control pool must be disjoint from the cases")
    rng = np.random.default_rng(seed)
    out = []
    shortfall = 0
    for ev, surgery_end in sorted(cases, key=lambda cs: cs[0].patient_id):
        elapsed = ev.event_time - surgery_end
        eligible = []
        for cand in pool:
            pseudo = cand.surgery_end + elapsed
            if (
                cand.telemetry_start <= pseudo - timedelta(hours=horizon_h)
                and cand.telemetry_end >= pseudo
            ):
                eligible.append((cand, pseudo))
        take = min(ratio, len(eligible))
        shortfall += ratio - take
        idx = rng.choice(len(eligible), size=take, replace=False) if take else []
        for i in sorted(idx):
            cand, pseudo = eligible[i]
            out.append(
                MatchedControl(
                    patient_id=cand.patient_id,
                    pseudo_event_time=pseudo,
                    case_patient_id=ev.patient_id,
                )
            )
    if shortfall:
        achieved = len(out) / max(1, len(cases))
        warnings.warn(
            f"insufficient eligible controls: achieved ratio {achieved:.2f}:1 "
            f"instead of {ratio}:1",
            stacklevel=2,
        )
    return out


# ---------------------------------------------------------------------------
# Cohort analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BarResult:
    lead_time_h: int
    mean_ratio: float | None
    n: int
    test: TestResult | None
    control_mean_ratio: float | None = None
    control_n: int = 0


@dataclass
class CohortResult:
    ref_offset_h: int
    kind: str  # "one_sample" or "two_sample"
    bars: dict[int, BarResult] = field(default_factory=dict)


def _ratio_populations(
    patients: list[tuple[str, RrTimeline, datetime]],
    ref_offset_h: int,
    horizon_h: int,
    min_minutes: int,
) -> dict[int, list[float]]:
    pops: dict[int, list[float]] = {t: [] for t in range(1, horizon_h - ref_offset_h + 1)}
    for pid, timeline, event_time in sorted(patients, key=lambda p: p[0]):
        bins = hourly_bins(timeline, event_time, horizon_h, min_minutes)
        for t, ratio in baseline_ratios(bins, ref_offset_h).items():
            if t in pops:
                pops[t].append(ratio)
    return pops


def cohort_analysis(
    patients: list[tuple[str, RrTimeline, datetime]],
    ref_offsets: list[int] | None = None,
    controls: list[tuple[str, RrTimeline, datetime]] | None = None,
    horizon_h: int = DEFAULT_HORIZON_H,
    min_minutes: int = BIN_MIN_MINUTES,
) -> list[CohortResult]:
    """Per-lead-time ratio statistics for one cohort (optionally vs controls).

    Each patient is a (patient_id, timeline, event_time) triple; timelines
    may come from model annotation or from simulation truth.  Single-cohort
    mode runs one-sample t-tests of the ratios against 1.0; with controls a
    Welch test compares the two populations at each hour.
    """
    if ref_offsets is None:
        ref_offsets = [DEFAULT_REF_OFFSET_H]
    results = []
    for offset in ref_offsets:
        pops = _ratio_populations(patients, offset, horizon_h, min_minutes)
        ctrl_pops = (
            _ratio_populations(controls, offset, horizon_h, min_minutes)
            if controls is not None
            else None
        )
        result = CohortResult(ref_offset_h=offset, kind="two_sample" if controls else "one_sample")
        any_bar = False
        for t, ratios in sorted(pops.items()):
            arr = np.asarray(ratios)
            mean_ratio = float(arr.mean()) if arr.size else None
            if ctrl_pops is None:
                test = one_sample_ttest(arr) if arr.size >= 2 else None
                bar = BarResult(lead_time_h=t, mean_ratio=mean_ratio, n=arr.size, test=test)
            else:
                carr = np.asarray(ctrl_pops.get(t, []))
                test = welch_ttest(arr, carr) if arr.size >= 2 and carr.size >= 2 else None
                bar = BarResult(
                    lead_time_h=t,
                    mean_ratio=mean_ratio,
                    n=arr.size,
                    test=test,
                    control_mean_ratio=float(carr.mean()) if carr.size else None,
                    control_n=carr.size,
                )
            any_bar = any_bar or mean_ratio is not None
            result.bars[t] = bar
        if not any_bar:
            warnings.warn(
                f"cohort analysis at offset {offset} h produced no usable bars", stacklevel=2
            )
        results.append(result)
    return results


def write_cohort_csv(result: CohortResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["lead_time_h", "mean_ratio", "N", "t", "df", "p", "stars"]
        if result.kind == "two_sample":
            header += ["control_mean_ratio", "control_N"]
        writer.writerow(header)
        for t in sorted(result.bars):
            bar = result.bars[t]
            row = [
                t,
                "" if bar.mean_ratio is None else repr(bar.mean_ratio),
                bar.n,
                "" if bar.test is None else repr(bar.test.t),
                "" if bar.test is None else repr(bar.test.df),
                "" if bar.test is None else repr(bar.test.p),
                "" if bar.test is None else bar.test.stars,
            ]
            if result.kind == "two_sample":
                row += [
                    "" if bar.control_mean_ratio is None else repr(bar.control_mean_ratio),
                    bar.control_n,
                ]
            writer.writerow(row)


def write_events_csv(events: list[ClinicalEvent], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "event_time_iso", "kind", "location"])
        for ev in events:
            writer.writerow([ev.patient_id, ev.event_time.isoformat(), ev.kind, ev.location])


def read_cohort_manifest(path: str | Path) -> list[tuple[ClinicalEvent, datetime | None]]:
    """Cohort input manifest: patient_id, event_time_iso, kind, surgery_end_iso?.

    The surgery end is optional (only reintubation-style cohorts carry it);
    rows come back as (event, surgery_end) pairs ready for control matching.
    """
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            event = ClinicalEvent(
                patient_id=row["patient_id"],
                event_time=datetime.fromisoformat(row["event_time_iso"]),
                kind=row.get("kind") or "rapid_response_intubation",
                location=row.get("location") or "ICU",
            )
            surgery = row.get("surgery_end_iso") or None
            out.append((event, datetime.fromisoformat(surgery) if surgery else None))
    return out
