"""Run configuration: one INI-style file with sections, flags override keys.

Every default reproduces the shipped pipeline constants (filter thresholds,
label rules, training protocol, cohort parameters), so an empty config file
is a valid, faithful run.  Whatever ends up effective is echoed into the run
manifest next to the artifacts.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import clinical, curation


@dataclass
class CurationConfig:
    amplitude_limit_mv: float = curation.AMPLITUDE_LIMIT_MV
    flat_range_mv: float = curation.FLAT_RANGE_MV
    target_rate_hz: int = curation.TARGET_RATE_HZ
    minute_samples: int = curation.MINUTE_SAMPLES
    label_min_positive: bool = True
    label_min_bpm: float = curation.LABEL_MIN_BPM
    label_max_bpm: float = curation.LABEL_MAX_BPM
    label_spread_bpm: float = curation.LABEL_SPREAD_BPM
    label_std_bpm: float = curation.LABEL_STD_BPM


@dataclass
class TrainSection:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay_per_epoch: float = 10.0
    weight_decay: float = 5e-5
    dropout_p: float = 0.3
    dtype: str = "float32"


@dataclass
class CohortConfig:
    horizon_h: int = clinical.DEFAULT_HORIZON_H
    ref_offset_h: int = clinical.DEFAULT_REF_OFFSET_H
    control_ratio: int = clinical.CONTROL_RATIO
    bin_min_minutes: int = clinical.BIN_MIN_MINUTES
    grace_period_min: int = clinical.GRACE_PERIOD_MIN


@dataclass
class SynthConfig:
    patients: int = 20
    minutes_per_patient: int = 10
    rr_lo: float = 10.0
    rr_hi: float = 30.0
    heart_rate_lo: float = 60.0
    heart_rate_hi: float = 90.0
    am_depth: float = 0.2
    rsa_depth: float = 0.05
    baseline_wander_mv: float = 0.1
    noise_std_mv: float = 0.05
    n_leads: int = 4
    schedule: str = "flat"
    schedule_delta_pct: float = 20.0
    schedule_hours: float = 10.0
    duration_h: float = 37.0
    dropout_lo: float = 0.10
    dropout_hi: float = 0.30


@dataclass
class RunConfig:
    seed: int = 0
    spec: str = "desk"
    lead_policy: str = ",".join(("II", "I", "III", "V"))
    split_fractions: tuple[float, float, float] = curation.SPLIT_FRACTIONS
    curation: CurationConfig = field(default_factory=CurationConfig)
    train: TrainSection = field(default_factory=TrainSection)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "curation": CurationConfig,
    "train": TrainSection,
    "cohort": CohortConfig,
    "synth": SynthConfig,
}


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [float(p) for p in raw.split(",")]
        return tuple(parts)
    return raw


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults, overridden by whatever keys the INI file provides."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if not hasattr(cfg, key):
                raise KeyError(f"unknown [run] key: {key}")
            setattr(cfg, key, _coerce(getattr(cfg, key), raw))
    for section, _ in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            if not hasattr(target, key):
                raise KeyError(f"unknown [{section}] key: {key}")
            setattr(target, key, _coerce(getattr(target, key), raw))
    return cfg
