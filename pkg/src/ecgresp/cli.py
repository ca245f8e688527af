"""Command-line pipeline: synth -> curate -> split -> train -> evaluate,
plus annotate, cohort and gradcheck.

Every command takes ``--config`` (INI, see :mod:`ecgresp.config`), ``--seed``
and ``--out``; flags override config keys.  Each run drops a
``run_manifest.json`` (command, effective config, seed, versions, wall time)
next to its artifacts.  Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from datetime import datetime, timezone
from functools import partial
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import clinical, curation, pipeline
from .config import RunConfig, load_config
from .curation import CurationError
from .evalstats import evaluate as eval_report, write_histogram_csv, write_timeline_csv
from .nn import (
    NumericError,
    SPEC_PRESETS,
    TrainConfig,
    build_model,
    grad_check,
    load_checkpoint,
    loss_curve_rows,
    save_checkpoint,
    tiny_spec,
    train_model,
)
from .synth import Schedule, SynthParams, synth_cohort, synth_ecg
from .waveform import WaveformError, read_native, write_native

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class PrerequisiteError(FileNotFoundError):
    def __init__(self, artifact: str, producer: str):
        super().__init__(
            f"missing prerequisite artifact {artifact!r}; run the {producer!r} command first"
        )


def _write_run_manifest(out: Path, command: str, cfg: RunConfig, started: float, argv) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {
            "ecgresp": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_time_s": time.time() - started,
        "finished_utc": datetime.now(timezone.utc).isoformat(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    """Generate synthetic records (flat schedule) or a cohort (ramp/step)."""
    s = cfg.synth
    rows = []
    if s.schedule == "flat":
        root = np.random.SeedSequence(cfg.seed)
        truth_dir = out / "truth"
        truth_dir.mkdir(parents=True, exist_ok=True)
        for p, child in enumerate(root.spawn(s.patients)):
            rng = np.random.default_rng(child)
            pid = f"synth{p:05d}"
            params = SynthParams(
                heart_rate=float(rng.uniform(s.heart_rate_lo, s.heart_rate_hi)),
                resp_rate=float(rng.uniform(s.rr_lo, s.rr_hi)),
                am_depth=s.am_depth,
                rsa_depth=s.rsa_depth,
                baseline_wander_mv=s.baseline_wander_mv,
                noise_std_mv=s.noise_std_mv,
                lead_gains=tuple(1.0 - 0.1 * i for i in range(s.n_leads)),
                seed=int(rng.integers(0, 2**31)),
            )
            rec = synth_ecg(params, duration_s=60.0 * s.minutes_per_patient, record_name=pid)
            write_native(rec.record, out / "records" / pid / "r000")
            with open(truth_dir / f"{pid}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["time_s", "rr_bpm"])
                for t, v in zip(rec.rr_times, rec.rr_values):
                    writer.writerow([repr(float(t)), repr(float(v))])
            rows.append((pid, "", "flat"))
    else:
        schedule = Schedule(
            kind=s.schedule,
            delta_pct=s.schedule_delta_pct,
            hours=s.schedule_hours,
            at_hour=s.schedule_hours,
        )
        patients = synth_cohort(
            s.patients,
            schedule,
            seed=cfg.seed,
            duration_h=s.duration_h,
            dropout=(s.dropout_lo, s.dropout_hi),
        )
        truth_dir = out / "truth"
        truth_dir.mkdir(parents=True, exist_ok=True)
        for cp in patients:
            times, values = cp.rr_stream()
            with open(truth_dir / f"{cp.patient_id}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["time_s", "rr_bpm"])
                for t, v in zip(times, values):
                    writer.writerow([repr(float(t)), repr(float(v))])
            rows.append((cp.patient_id, cp.event_time.isoformat(), s.schedule))
    with open(out / "synth_manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "event_time_iso", "schedule"])
        writer.writerows(rows)
    print(f"synth: wrote {len(rows)} patients to {out}")


def _read_truth_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    times, values = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["time_s"]))
            values.append(float(row["rr_bpm"]))
    return np.asarray(times), np.asarray(values)


def cmd_curate(cfg: RunConfig, records_root: Path, out: Path) -> None:
    """Records plus RR truth -> curated example arrays and tabular logs."""
    records_dir = records_root / "records"
    truth_dir = records_root / "truth"
    if not records_dir.is_dir():
        raise PrerequisiteError(str(records_dir), "synth")
    cc = cfg.curation
    accept_fn = partial(
        curation.accept_label,
        min_bpm=cc.label_min_bpm,
        max_bpm=cc.label_max_bpm,
        spread_bpm=cc.label_spread_bpm,
        std_bpm=cc.label_std_bpm,
    )
    examples = []
    rejections: list = []
    for patient_dir in sorted(records_dir.iterdir()):
        pid = patient_dir.name
        truth_path = truth_dir / f"{pid}.csv"
        if not truth_path.exists():
            raise PrerequisiteError(str(truth_path), "synth")
        rr_times, rr_values = _read_truth_csv(truth_path)
        for record_dir in sorted(patient_dir.iterdir()):
            record = read_native(record_dir)
            examples.extend(
                pipeline.curate_record(
                    record,
                    rr_times,
                    rr_values,
                    patient_id=pid,
                    source="synthetic",
                    rejection_log=rejections,
                    accept_fn=accept_fn,
                )
            )
    X, y, patients, sources = pipeline.examples_to_arrays(examples)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "X.npy", X)
    np.save(out / "y.npy", y)
    (out / "patients.json").write_text(json.dumps(patients))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "lead", "start_time_iso", "label_bpm", "source", "split"])
        for ex in examples:
            writer.writerow(
                [
                    ex.patient_id,
                    ex.ecg.lead_name,
                    ex.ecg.start_time.isoformat(),
                    repr(ex.label),
                    ex.source,
                    "",
                ]
            )
    curation.write_rejection_log(rejections, out / "rejects.csv")
    print(f"curate: {len(examples)} examples from {len(set(patients))} patients -> {out}")


def _load_dataset(data: Path):
    if not (data / "X.npy").exists():
        raise PrerequisiteError(str(data / "X.npy"), "curate")
    X = np.load(data / "X.npy")
    y = np.load(data / "y.npy")
    patients = json.loads((data / "patients.json").read_text())
    return X, y, patients


def cmd_split(cfg: RunConfig, data: Path) -> None:
    """Assign patient-disjoint splits and record them next to the arrays."""
    X, y, patients = _load_dataset(data)
    unique = sorted(set(patients))
    if len(unique) == 1:
        assignment = {unique[0]: "train"}
    else:
        assignment = {
            p: curation.assign_split(p, cfg.seed, cfg.split_fractions) for p in unique
        }
    splits = {name: [] for name in curation.SPLIT_NAMES}
    for i, p in enumerate(patients):
        splits[assignment[p]].append(i)
    (data / "splits.json").write_text(json.dumps(splits))

    manifest = data / "manifest.csv"
    if manifest.exists():  # fill the split column, row order matches X rows
        with open(manifest, newline="") as fh:
            rows = list(csv.reader(fh))
        for i, row in enumerate(rows[1:]):
            row[-1] = assignment[patients[i]]
        with open(manifest, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)

    counts = {k: len(v) for k, v in splits.items()}
    print(f"split: {counts} (seed {cfg.seed})")


def cmd_train(cfg: RunConfig, data: Path, out: Path) -> None:
    X, y, patients = _load_dataset(data)
    splits_path = data / "splits.json"
    if not splits_path.exists():
        raise PrerequisiteError(str(splits_path), "split")
    splits = json.loads(splits_path.read_text())
    tr, tu = splits["train"], splits["tune"]
    if not tr:
        raise CurationError("empty train split")
    spec = SPEC_PRESETS[cfg.spec]()
    tc = TrainConfig(
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr,
        lr_decay_per_epoch=cfg.train.lr_decay_per_epoch,
        weight_decay=cfg.train.weight_decay,
        seed=cfg.seed,
        dtype=cfg.train.dtype,
    )
    result = train_model(
        X[tr],
        y[tr],
        spec,
        tc,
        X_tune=X[tu] if tu else None,
        y_tune=y[tu] if tu else None,
        verbose=True,
    )
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "checkpoint")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "mse"])
        for row in loss_curve_rows(result.history):
            writer.writerow([row[0], row[1], repr(row[2])])
    print(f"train: {len(tr)} examples, best epoch {result.best_epoch} -> {out / 'checkpoint'}")


def cmd_evaluate(cfg: RunConfig, data: Path, model_dir: Path, out: Path) -> None:
    X, y, patients = _load_dataset(data)
    splits_path = data / "splits.json"
    if not splits_path.exists():
        raise PrerequisiteError(str(splits_path), "split")
    if not (model_dir / "model.json").exists():
        raise PrerequisiteError(str(model_dir / "model.json"), "train")
    splits = json.loads(splits_path.read_text())
    te = splits["test"] or splits["train"]
    model = load_checkpoint(model_dir)
    from .curation import znormalize_batch
    from .nn.model import predict

    preds = predict(model, znormalize_batch(X[te]))
    report = eval_report(preds, y[te])
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json())
    write_histogram_csv(report.histogram, out / "histogram.csv")
    print(
        f"evaluate: n={report.n_examples} mae={report.mae_bpm:.3f} bpm r2={report.r2:.3f} -> {out}"
    )


def cmd_annotate(
    cfg: RunConfig,
    records_root: Path,
    patient: str,
    model_dir: Path,
    out: Path,
    truth: Path | None = None,
) -> None:
    if not (model_dir / "model.json").exists():
        raise PrerequisiteError(str(model_dir / "model.json"), "train")
    patient_dir = records_root / "records" / patient
    if not patient_dir.is_dir():
        raise PrerequisiteError(str(patient_dir), "synth")
    model = load_checkpoint(model_dir)
    minutes = []
    for record_dir in sorted(patient_dir.iterdir()):
        record = read_native(record_dir)
        for lead in range(record.n_leads):
            sig = record.header.signals[lead]
            phys = (record.adu[lead].astype(np.float64) - sig.baseline) / sig.gain
            record.mask[lead] = curation.remove_out_of_range(phys, record.mask[lead])
            minutes.extend(curation.extract_minutes(record, lead, patient_id=patient))
    from .evalstats import annotate_timeline

    labels_by_minute = None
    if truth is not None:
        times, values = _read_truth_csv(truth)
        keys = np.floor(times / 60.0).astype(np.int64)
        uniq, idx = np.unique(keys, return_index=True)
        means = np.add.reduceat(values, idx) / np.diff(np.append(idx, len(values)))
        labels_by_minute = {float(k * 60.0): float(v) for k, v in zip(uniq, means)}

    priority = tuple(cfg.lead_policy.split(","))
    timeline = annotate_timeline(
        model,
        pipeline.group_minutes_by_lead(minutes),
        patient,
        lead_priority=priority,
        labels_by_minute=labels_by_minute,
    )
    out.mkdir(parents=True, exist_ok=True)
    write_timeline_csv(timeline, out / f"timeline_{patient}.csv")
    print(f"annotate: {len(timeline)} minutes for {patient} -> {out}")


def cmd_cohort(cfg: RunConfig, cohort_dir: Path, control_dir: Path | None, out: Path, offsets: list[int]) -> None:
    """Ratio-to-baseline statistics from a synthesized cohort's truth streams."""

    def load_cohort(root: Path):
        manifest = root / "synth_manifest.csv"
        if not manifest.exists():
            raise PrerequisiteError(str(manifest), "synth")
        patients = []
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                if not row["event_time_iso"]:
                    raise CurationError(
                        f"patient {row['patient_id']} has no event time; "
                        "cohort analysis needs a ramp/step synth run"
                    )
                event_time = datetime.fromisoformat(row["event_time_iso"])
                times, values = _read_truth_csv(root / "truth" / f"{row['patient_id']}.csv")
                # minute means from the 0.5 Hz truth stream
                minute_keys = np.floor(times / 60.0).astype(np.int64)
                uniq, idx = np.unique(minute_keys, return_index=True)
                means = np.add.reduceat(values, idx) / np.diff(np.append(idx, len(values)))
                timeline = pipeline.cohort_truth_timeline(
                    uniq * 60.0, means, row["patient_id"]
                )
                patients.append((row["patient_id"], timeline, event_time))
        return patients

    patients = load_cohort(cohort_dir)
    controls = load_cohort(control_dir) if control_dir else None
    results = clinical.cohort_analysis(
        patients,
        ref_offsets=offsets,
        controls=controls,
        horizon_h=cfg.cohort.horizon_h,
        min_minutes=cfg.cohort.bin_min_minutes,
    )
    out.mkdir(parents=True, exist_ok=True)
    for result in results:
        clinical.write_cohort_csv(result, out / f"cohort_ref{result.ref_offset_h:02d}.csv")
    print(f"cohort: {len(patients)} patients, offsets {offsets} -> {out}")


def cmd_gradcheck(cfg: RunConfig, out: Path | None) -> None:
    rng = np.random.default_rng(cfg.seed)
    model = build_model(tiny_spec(), seed=cfg.seed, dtype=np.float64, init="fan_in")
    x = rng.standard_normal((2, 1, 64))
    y = rng.uniform(10, 30, size=2)
    err = grad_check(model, x, y)
    print(f"gradcheck: tiny spec max relative error {err:.3e}")
    if err >= 1e-4:
        raise NumericError(f"gradient check failed: {err:.3e} >= 1e-4")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps({"max_rel_err": err}))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecgresp", description="ECG-to-respiratory-rate pipeline"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("synth", help="generate synthetic records or a cohort")
    common(p)
    p.add_argument("--patients", type=int, default=None)
    p.add_argument("--minutes", type=int, default=None, help="minutes per patient (flat mode)")
    p.add_argument("--schedule", choices=["flat", "ramp", "step"], default=None)

    p = sub.add_parser("curate", help="records + RR truth -> curated dataset")
    common(p)
    p.add_argument("--records", type=Path, required=True, help="synth output directory")

    p = sub.add_parser("split", help="assign patient-stratified splits")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", type=Path, required=True, help="curate output directory")

    p = sub.add_parser("train", help="train the regressor")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--spec", choices=sorted(SPEC_PRESETS), default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("evaluate", help="technical validation on the test split")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="train output directory")

    p = sub.add_parser("annotate", help="longitudinal RR timeline for one patient")
    common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--patient", type=str, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--lead-policy", type=str, default=None, help="comma-separated lead priority")
    p.add_argument("--truth", type=Path, default=None, help="truth CSV to overlay as labels")

    p = sub.add_parser("cohort", help="pre-event ratio statistics for a cohort")
    common(p)
    p.add_argument("--cohort-dir", type=Path, required=True, help="synth (ramp/step) output")
    p.add_argument("--control-dir", type=Path, default=None, help="synth (flat-jitter) output")
    p.add_argument("--ref-offset", type=str, default=None, help="hours, comma-separated for a sweep")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK

    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "spec", None):
            cfg.spec = args.spec
        if getattr(args, "epochs", None):
            cfg.train.epochs = args.epochs
        if getattr(args, "lead_policy", None):
            cfg.lead_policy = args.lead_policy
        if getattr(args, "patients", None):
            cfg.synth.patients = args.patients
        if getattr(args, "minutes", None):
            cfg.synth.minutes_per_patient = args.minutes
        if getattr(args, "schedule", None):
            cfg.synth.schedule = args.schedule

        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "curate":
            cmd_curate(cfg, args.records, args.out)
        elif args.command == "split":
            cmd_split(cfg, args.data)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.data, args.model, args.out)
        elif args.command == "annotate":
            cmd_annotate(cfg, args.records, args.patient, args.model, args.out, args.truth)
        elif args.command == "cohort":
            offsets = (
                [int(x) for x in args.ref_offset.split(",")]
                if args.ref_offset
                else [cfg.cohort.ref_offset_h]
            )
            cmd_cohort(cfg, args.cohort_dir, args.control_dir, args.out, offsets)
        elif args.command == "gradcheck":
            cmd_gradcheck(cfg, args.out)
        else:  # pragma: no cover - argparse enforces choices
            parser.print_usage()
            return EXIT_USAGE

        out = getattr(args, "out", None)
        if out is not None:
            _write_run_manifest(out, args.command, cfg, started, argv)
        elif args.command == "split":
            _write_run_manifest(args.data, args.command, cfg, started, argv)
        return EXIT_OK
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WaveformError, CurationError, clinical.StatsError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
