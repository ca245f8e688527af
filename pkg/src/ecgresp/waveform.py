"""Waveform record I/O.

Two families of containers are handled here:

* External header-plus-binary records following the public waveform-database
  convention (a text ``.hea`` header describing packed sample files).  Only
  sample formats 16 and 212 are supported; anything else is rejected loudly.
* The toolkit's own native store: one JSON metadata file plus one raw
  little-endian 16-bit sample file per lead.  The native store is lossless
  (bit-exact round trips) and trivially inspectable.

Digital samples are kept as integer ADC units (adu) internally; physical
values in mV are derived as ``(adu - baseline) / gain``.  Missing samples are
tracked with a boolean mask and stored as the format-16 sentinel -32768.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

SUPPORTED_FORMATS = (16, 212)

# Sentinel digital values marking a missing sample, per public-database use.
MISSING_FMT16 = -32768
MISSING_FMT212 = -2048

DEFAULT_GAIN = 200.0  # adu per mV when the header omits the gain

NATIVE_VERSION = 1


class WaveformError(ValueError):
    """Malformed header, unsupported format or inconsistent payload."""


@dataclass(frozen=True)
class SignalInfo:
    """Per-signal entry of a record header.

    ``file_name`` says where the packed bytes live in a particular container
    and is not part of the record's identity.
    """

    file_name: str = field(compare=False)
    format_code: int = 16
    gain: float = DEFAULT_GAIN
    baseline: int = 0
    lead_name: str = ""

    def __post_init__(self):
        if self.format_code not in SUPPORTED_FORMATS:
            raise WaveformError(
                f"signal {self.lead_name!r}: unsupported format {self.format_code} "
                f"(supported: {SUPPORTED_FORMATS})"
            )
        if self.gain == 0:
            raise WaveformError(f"signal {self.lead_name!r}: zero gain")


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sample_rate: Fraction
    n_samples: int
    signals: tuple[SignalInfo, ...]

    def __post_init__(self):
        if not isinstance(self.sample_rate, Fraction):
            object.__setattr__(self, "sample_rate", Fraction(self.sample_rate).limit_denominator(10**6))
        if self.n_signals < 1:
            raise WaveformError(f"record {self.record_name!r}: no signals")
        if self.sample_rate <= 0:
            raise WaveformError(f"record {self.record_name!r}: sample rate must be positive")
        if len(self.signals) != self.n_signals:
            raise WaveformError(
                f"record {self.record_name!r}: {self.n_signals} signals declared "
                f"but {len(self.signals)} signal lines given"
            )

    @property
    def lead_names(self) -> list[str]:
        return [s.lead_name for s in self.signals]


@dataclass
class WaveformRecord:
    """Multi-lead sampled signal with absolute start time.

    ``adu`` holds one int32 array per lead (equal lengths); ``mask`` holds one
    boolean array per lead, True where the sample is missing.  Masked entries
    carry no physical value.
    """

    header: RecordHeader
    start_time: datetime
    adu: list[np.ndarray]
    mask: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.adu = [np.asarray(a, dtype=np.int32) for a in self.adu]
        if not self.mask:
            self.mask = [np.zeros(len(a), dtype=bool) for a in self.adu]
        self.mask = [np.asarray(m, dtype=bool) for m in self.mask]
        if len(self.adu) != self.header.n_signals or len(self.mask) != self.header.n_signals:
            raise WaveformError("lead count does not match header")
        lengths = {len(a) for a in self.adu} | {len(m) for m in self.mask}
        if len(lengths) > 1:
            raise WaveformError(f"leads have unequal lengths: {sorted(lengths)}")
        if self.start_time.tzinfo is None:
            raise WaveformError("start_time must be timezone-aware")
        for sig, a, m in zip(self.header.signals, self.adu, self.mask):
            live = a[~m]
            if live.size and (live.min() < -32767 or live.max() > 32767):
                raise WaveformError(
                    f"lead {sig.lead_name!r}: adu outside [-32767, 32767] "
                    "cannot be stored losslessly"
                )
            # canonical form: a masked sample carries no value
            a[m] = MISSING_FMT16

    @property
    def n_leads(self) -> int:
        return self.header.n_signals

    @property
    def n_samples(self) -> int:
        return len(self.adu[0]) if self.adu else 0

    @property
    def sample_rate(self) -> Fraction:
        return self.header.sample_rate

    def physical(self, lead: int) -> np.ndarray:
        """Physical values in mV for one lead; masked samples are NaN."""
        sig = self.header.signals[lead]
        out = (self.adu[lead].astype(np.float64) - sig.baseline) / sig.gain
        out[self.mask[lead]] = np.nan
        return out

    def lead_index(self, lead_name: str) -> int:
        try:
            return self.header.lead_names.index(lead_name)
        except ValueError:
            raise KeyError(f"no lead named {lead_name!r}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, WaveformRecord):
            return NotImplemented
        return (
            self.header == other.header
            and self.start_time == other.start_time
            and all(np.array_equal(a, b) for a, b in zip(self.adu, other.adu))
            and all(np.array_equal(a, b) for a, b in zip(self.mask, other.mask))
        )


def physical_to_adu(values_mv: np.ndarray, gain: float, baseline: int) -> np.ndarray:
    """Quantize physical mV to integer adu (inverse of the header conversion)."""
    return np.rint(np.asarray(values_mv, dtype=np.float64) * gain + baseline).astype(np.int32)


# ---------------------------------------------------------------------------
# Header text format
# ---------------------------------------------------------------------------

# Record line: name[/nseg] nsig [fs [nsamples ...]]; extra fields are ignored.
_RECORD_RE = re.compile(
    r"^(?P<name>[-\w.]+)(?:/(?P<nseg>\d+))?\s+(?P<nsig>\d+)"
    r"(?:\s+(?P<fs>\d+(?:\.\d+)?)(?:/\S*)?)?"
    r"(?:\s+(?P<nsamp>\d+))?"
)

# Signal line: file format[xN][:skew][+offset] [gain[(baseline)][/units]
#              [adcres [adczero [initval [cksum [blocksize [description]]]]]]]
_SIGNAL_RE = re.compile(
    r"^(?P<file>\S+)\s+(?P<fmt>\d+)(?:x\d+)?(?::\d+)?(?:\+\d+)?"
    r"(?:\s+(?P<gain>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)(?:\((?P<baseline>-?\d+)\))?(?:/\S*)?)?"
    r"(?:\s+(?P<adcres>\d+))?"
    r"(?:\s+(?P<adczero>-?\d+))?"
    r"(?:\s+(?P<initval>-?\d+))?"
    r"(?:\s+(?P<cksum>-?\d+))?"
    r"(?:\s+(?P<blocksize>\d+))?"
    r"(?:\s+(?P<desc>.+?))?\s*$"
)


def parse_header(text: str) -> RecordHeader:
    """Parse header-file content into a :class:`RecordHeader`.

    Follows the public convention: one record line, then one line per signal.
    Comment lines (leading ``#``) and blank lines are skipped.  Unknown
    optional fields are ignored; lead names (the trailing description) are
    preserved verbatim.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise WaveformError("empty header")

    m = _RECORD_RE.match(lines[0])
    if m is None:
        raise WaveformError(f"malformed record line: {lines[0]!r}")
    name = m.group("name")
    n_signals = int(m.group("nsig"))
    if n_signals < 1:
        raise WaveformError(f"record {name!r}: no signals")
    fs = Fraction(m.group("fs")) if m.group("fs") else Fraction(250)
    if fs <= 0:
        raise WaveformError(f"record {name!r}: sample rate must be positive")
    n_samples = int(m.group("nsamp")) if m.group("nsamp") else 0

    signal_lines = lines[1 : 1 + n_signals]
    if len(signal_lines) < n_signals:
        raise WaveformError(
            f"record {name!r}: expected {n_signals} signal lines, got {len(signal_lines)}"
        )

    signals = []
    for i, ln in enumerate(signal_lines):
        sm = _SIGNAL_RE.match(ln)
        if sm is None:
            raise WaveformError(f"signal line {i}: malformed: {ln!r}")
        fmt = int(sm.group("fmt"))
        if fmt not in SUPPORTED_FORMATS:
            raise WaveformError(f"signal line {i}: unsupported format {fmt}")
        gain = float(sm.group("gain")) if sm.group("gain") else DEFAULT_GAIN
        if gain == 0:
            raise WaveformError(f"signal line {i}: zero gain")
        if sm.group("baseline") is not None:
            baseline = int(sm.group("baseline"))
        elif sm.group("adczero") is not None:
            baseline = int(sm.group("adczero"))
        else:
            baseline = 0
        lead_name = sm.group("desc") or f"sig{i}"
        signals.append(
            SignalInfo(
                file_name=sm.group("file"),
                format_code=fmt,
                gain=gain,
                baseline=baseline,
                lead_name=lead_name,
            )
        )

    return RecordHeader(
        record_name=name,
        n_signals=n_signals,
        sample_rate=fs,
        n_samples=n_samples,
        signals=tuple(signals),
    )


# ---------------------------------------------------------------------------
# Packed sample codecs
# ---------------------------------------------------------------------------


def decode_samples(payload: bytes, header: RecordHeader) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Decode a packed payload into per-lead integer samples plus masks.

    All signals of the record must share one format code and live in a single
    interleaved file (samples laid out frame-wise).  Format 16 is
    little-endian two's-complement int16; format 212 packs two 12-bit
    two's-complement samples into three bytes.  Sentinel values (-32768 for
    format 16, -2048 for format 212) become masked samples.
    """
    fmts = {s.format_code for s in header.signals}
    if len(fmts) > 1:
        raise WaveformError(f"mixed formats in one payload: {sorted(fmts)}")
    fmt = fmts.pop()
    nsig = header.n_signals
    total = header.n_samples * nsig

    if fmt == 16:
        expected = total * 2
        if len(payload) < expected:
            raise WaveformError(
                f"truncated payload: need {expected} bytes, got {len(payload)}"
            )
        if len(payload) > expected:
            raise WaveformError(
                f"trailing bytes beyond declared samples at offset {expected}"
            )
        flat = np.frombuffer(payload, dtype="<i2").astype(np.int32)
        missing = MISSING_FMT16
    elif fmt == 212:
        expected = (total * 3 + 1) // 2  # ceil(total * 1.5)
        if len(payload) < expected:
            raise WaveformError(
                f"truncated payload: need {expected} bytes, got {len(payload)}"
            )
        if len(payload) > expected:
            raise WaveformError(
                f"trailing bytes beyond declared samples at offset {expected}"
            )
        raw = np.frombuffer(payload, dtype=np.uint8).astype(np.int32)
        if total % 2:  # pad to a whole byte triplet for vectorized unpacking
            raw = np.concatenate([raw, np.zeros(3 - len(raw) % 3, dtype=np.int32)])
        b0, b1, b2 = raw[0::3], raw[1::3], raw[2::3]
        flat = np.empty(2 * len(b0), dtype=np.int32)
        flat[0::2] = b0 + ((b1 & 0x0F) << 8)
        flat[1::2] = b2 + ((b1 & 0xF0) << 4)
        flat[flat > 2047] -= 4096  # 12-bit two's complement
        flat = flat[:total]
        missing = MISSING_FMT212
    else:  # pragma: no cover - rejected upstream by SignalInfo
        raise WaveformError(f"unsupported format {fmt}")

    by_lead = flat.reshape(header.n_samples, nsig).T
    adu = [np.ascontiguousarray(by_lead[i]) for i in range(nsig)]
    mask = [a == missing for a in adu]
    return adu, mask


def encode_samples(adu: list[np.ndarray], mask: list[np.ndarray], format_code: int) -> bytes:
    """Inverse of :func:`decode_samples` for a uniform-format record."""
    if format_code not in SUPPORTED_FORMATS:
        raise WaveformError(f"unsupported format {format_code}")
    stacked = np.stack([np.asarray(a, dtype=np.int32) for a in adu], axis=1)
    mk = np.stack([np.asarray(m, dtype=bool) for m in mask], axis=1)
    flat = stacked.copy()
    if format_code == 16:
        flat[mk] = MISSING_FMT16
        flat = flat.reshape(-1)
        if flat.size and (flat.min() < -32768 or flat.max() > 32767):
            raise WaveformError("sample out of int16 range")
        return flat.astype("<i2").tobytes()

    flat[mk] = MISSING_FMT212
    flat = flat.reshape(-1)
    if flat.size and (flat.min() < -2048 or flat.max() > 2047):
        raise WaveformError("sample out of 12-bit range")
    vals = np.where(flat < 0, flat + 4096, flat).astype(np.uint32)
    if len(vals) % 2:
        vals = np.concatenate([vals, np.zeros(1, dtype=np.uint32)])
    s1, s2 = vals[0::2], vals[1::2]
    out = np.empty(3 * len(s1), dtype=np.uint8)
    out[0::3] = s1 & 0xFF
    out[1::3] = ((s1 >> 8) & 0x0F) | (((s2 >> 8) & 0x0F) << 4)
    out[2::3] = s2 & 0xFF
    n_bytes = (flat.size * 3 + 1) // 2
    return out.tobytes()[:n_bytes]


def read_external(header_path: str | Path, start_time: datetime | None = None) -> WaveformRecord:
    """Read a header-plus-binary external record from disk."""
    header_path = Path(header_path)
    header = parse_header(header_path.read_text())
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise WaveformError("records spanning multiple sample files are not supported")
    payload = (header_path.parent / files.pop()).read_bytes()
    adu, mask = decode_samples(payload, header)
    if start_time is None:
        start_time = datetime(2000, 1, 1, tzinfo=timezone.utc)
    return WaveformRecord(header=header, start_time=start_time, adu=adu, mask=mask)


# ---------------------------------------------------------------------------
# Native store
# ---------------------------------------------------------------------------


def _lead_file(i: int) -> str:
    return f"lead{i:02d}.dat"


def write_native(record: WaveformRecord, path: str | Path) -> None:
    """Write a record to a native-store directory (JSON + raw int16 per lead)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": NATIVE_VERSION,
        "record_name": record.header.record_name,
        "n_signals": int(record.header.n_signals),
        "sample_rate": [
            int(record.header.sample_rate.numerator),
            int(record.header.sample_rate.denominator),
        ],
        "n_samples": int(record.n_samples),
        "start_epoch_ms": int(record.start_time.timestamp() * 1000),
        "start_iso": record.start_time.isoformat(),
        "signals": [
            {
                "file": _lead_file(i),
                "gain": s.gain,
                "baseline": s.baseline,
                "lead_name": s.lead_name,
            }
            for i, s in enumerate(record.header.signals)
        ],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    for i in range(record.n_leads):
        vals = record.adu[i].astype(np.int32).copy()
        vals[record.mask[i]] = MISSING_FMT16
        (path / _lead_file(i)).write_bytes(vals.astype("<i2").tobytes())


def read_native(path: str | Path) -> WaveformRecord:
    """Read a record previously written with :func:`write_native`."""
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise WaveformError(f"not a native record: {path}") from None
    if meta.get("version") != NATIVE_VERSION:
        raise WaveformError(
            f"native container version {meta.get('version')} not supported "
            f"(expected {NATIVE_VERSION})"
        )
    signals = tuple(
        SignalInfo(
            file_name=s["file"],
            format_code=16,
            gain=s["gain"],
            baseline=s["baseline"],
            lead_name=s["lead_name"],
        )
        for s in meta["signals"]
    )
    header = RecordHeader(
        record_name=meta["record_name"],
        n_signals=meta["n_signals"],
        sample_rate=Fraction(*meta["sample_rate"]),
        n_samples=meta["n_samples"],
        signals=signals,
    )
    start = datetime.fromtimestamp(meta["start_epoch_ms"] / 1000, tz=timezone.utc)
    adu, mask = [], []
    for s in meta["signals"]:
        vals = np.frombuffer((path / s["file"]).read_bytes(), dtype="<i2").astype(np.int32)
        if len(vals) != meta["n_samples"]:
            raise WaveformError(
                f"lead file {s['file']}: {len(vals)} samples, header says {meta['n_samples']}"
            )
        m = vals == MISSING_FMT16
        adu.append(vals)
        mask.append(m)
    return WaveformRecord(header=header, start_time=start, adu=adu, mask=mask)


def export_csv(record: WaveformRecord, path: str | Path) -> None:
    """Dump decoded leads as CSV rows (time_s, lead_name, mV); masked samples skipped."""
    dt = 1.0 / float(record.sample_rate)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "lead_name", "mV"])
        for i, sig in enumerate(record.header.signals):
            phys = record.physical(i)
            for k in np.flatnonzero(~record.mask[i]):
                writer.writerow([f"{k * dt:.6f}", sig.lead_name, repr(float(phys[k]))])
