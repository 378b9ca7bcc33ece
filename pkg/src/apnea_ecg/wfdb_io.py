"""Reading and writing PhysioNet WFDB records, apnea annotations and feature files.

Only the pieces of the WFDB container that the Apnea-ECG database uses are
supported: single-segment records, signal formats 212 and 16, and MIT-format
binary annotation streams carrying one ``A``/``N`` marker per minute.
"""

from __future__ import annotations

import csv
import io
import os
import re
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SUPPORTED_FORMATS = (212, 16)

# MIT annotation codes used by Apnea-ECG (.apn): NORMAL for non-apnea, APC for apnea.
ANN_NORMAL = 1
ANN_APNEA = 8
_ANN_SKIP, _ANN_NUM, _ANN_SUB, _ANN_CHN, _ANN_AUX = 59, 60, 61, 62, 63
_APNEA_CODES = {ANN_NORMAL: 0, ANN_APNEA: 1}

FEATURE_MAGIC = b"APNF"
FEATURE_VERSION = 1

# Released learning set and withheld test set of Apnea-ECG.
TRAIN_RECORDS = tuple(
    [f"a{i:02d}" for i in range(1, 21)]
    + [f"b{i:02d}" for i in range(1, 6)]
    + [f"c{i:02d}" for i in range(1, 11)]
)
TEST_RECORDS = tuple(f"x{i:02d}" for i in range(1, 36))


class WfdbError(ValueError):
    """Malformed or unsupported WFDB content."""


class FeatureFileError(ValueError):
    """Feature container could not be read."""


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    fmt: int
    gain: float = 200.0
    baseline: int = 0
    units: str = "mV"
    adc_res: int = 12
    adc_zero: int = 0
    init_value: int = 0
    checksum: int = 0
    block_size: int = 0
    description: str = ""
    byte_offset: int = 0


@dataclass(frozen=True)
class HeaderInfo:
    record_name: str
    n_sig: int
    fs: float
    n_samples: int
    signals: tuple[SignalSpec, ...] = ()

    @property
    def gain(self) -> float:
        return self.signals[0].gain

    @property
    def fmt(self) -> int:
        return self.signals[0].fmt


@dataclass(frozen=True)
class EcgRecord:
    record_id: str
    fs: float
    samples: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __post_init__(self):
        if self.fs <= 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int8)
        if labels.size and (labels.size - 1) * 60 * self.fs >= samples.size:
            raise ValueError(
                f"{self.record_id}: label {labels.size - 1} starts beyond the signal end"
            )
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def n_labeled_minutes(self) -> int:
        return int(self.labels.size)

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs


@dataclass(frozen=True)
class DatasetSplit:
    train_records: tuple[str, ...] = TRAIN_RECORDS
    test_records: tuple[str, ...] = TEST_RECORDS

    def __post_init__(self):
        overlap = set(self.train_records) & set(self.test_records)
        if overlap:
            raise ValueError(f"train and test overlap: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# Headers


def _to_text(data: bytes | str) -> str:
    if isinstance(data, bytes):
        return data.decode("ascii", errors="strict")
    return data


_FMT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?::(\d+))?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\((-?\d+)\))?(?:/(\S+))?$")


def parse_header(data: bytes | str) -> HeaderInfo:
    """Parse a ``.hea`` header.

    Raises ``WfdbError`` on malformed lines or a storage format other than
    212 or 16.
    """
    lines = [ln.strip() for ln in _to_text(data).splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise WfdbError("empty header")

    rec = lines[0].split()
    if len(rec) < 2:
        raise WfdbError(f"malformed record line: {lines[0]!r}")
    name = rec[0]
    if "/" in name:
        raise WfdbError("multi-segment records are not supported")
    try:
        n_sig = int(rec[1])
        fs = float(rec[2].split("/")[0].split("(")[0]) if len(rec) > 2 else 250.0
        n_samples = int(rec[3]) if len(rec) > 3 else 0
    except ValueError as exc:
        raise WfdbError(f"malformed record line: {lines[0]!r}") from exc
    if n_sig < 0 or fs <= 0 or n_samples < 0:
        raise WfdbError(f"malformed record line: {lines[0]!r}")

    sig_lines = lines[1 : 1 + n_sig]
    if len(sig_lines) != n_sig:
        raise WfdbError(f"header declares {n_sig} signals but has {len(sig_lines)} lines")
    signals = tuple(_parse_signal_line(ln) for ln in sig_lines)
    return HeaderInfo(record_name=name, n_sig=n_sig, fs=fs, n_samples=n_samples, signals=signals)


def _parse_signal_line(line: str) -> SignalSpec:
    parts = line.split(maxsplit=8)
    if len(parts) < 2:
        raise WfdbError(f"malformed signal line: {line!r}")
    m = _FMT_RE.match(parts[1])
    if not m:
        raise WfdbError(f"malformed format field: {parts[1]!r}")
    fmt = int(m.group(1))
    if fmt not in SUPPORTED_FORMATS:
        raise WfdbError(f"unsupported signal format {fmt} (supported: 212, 16)")
    if m.group(2) not in (None, "1") or m.group(3) not in (None, "0"):
        raise WfdbError("sample multiplicity and skew are not supported")
    offset = int(m.group(4) or 0)

    kw: dict = {}
    try:
        if len(parts) > 2:
            g = _GAIN_RE.match(parts[2])
            if not g:
                raise WfdbError(f"malformed gain field: {parts[2]!r}")
            gain = float(g.group(1))
            kw["gain"] = gain if gain != 0 else 200.0
            if g.group(3):
                kw["units"] = g.group(3)
            baseline = g.group(2)
        else:
            baseline = None
        if len(parts) > 3:
            kw["adc_res"] = int(parts[3])
        if len(parts) > 4:
            kw["adc_zero"] = int(parts[4])
        if len(parts) > 5:
            kw["init_value"] = int(parts[5])
        if len(parts) > 6:
            kw["checksum"] = int(parts[6])
        if len(parts) > 7:
            kw["block_size"] = int(parts[7])
        if len(parts) > 8:
            kw["description"] = parts[8]
    except ValueError as exc:
        raise WfdbError(f"malformed signal line: {line!r}") from exc
    # WFDB: baseline defaults to the ADC zero.
    kw["baseline"] = int(baseline) if baseline is not None else kw.get("adc_zero", 0)
    return SignalSpec(file_name=parts[0], fmt=fmt, byte_offset=offset, **kw)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_header(info: HeaderInfo) -> str:
    lines = [f"{info.record_name} {info.n_sig} {_fmt_num(info.fs)} {info.n_samples}"]
    for s in info.signals:
        fmt = f"{s.fmt}+{s.byte_offset}" if s.byte_offset else str(s.fmt)
        gain = f"{_fmt_num(s.gain)}({s.baseline})/{s.units}"
        fields = [s.file_name, fmt, gain, str(s.adc_res), str(s.adc_zero),
                  str(s.init_value), str(s.checksum), str(s.block_size)]
        if s.description:
            fields.append(s.description)
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Signal payloads


def _expected_bytes(fmt: int, n_values: int) -> tuple[int, ...]:
    if fmt == 16:
        return (2 * n_values,)
    # 212: two samples per three bytes; a trailing odd sample takes 2 or 3 bytes.
    full = 3 * (n_values // 2)
    return (full,) if n_values % 2 == 0 else (full + 2, full + 3)


def decode_counts(data: bytes, fmt: int, n_values: int | None = None) -> np.ndarray:
    """Decode raw ADC counts (sign-extended ints) from a format 212 or 16 payload."""
    buf = np.frombuffer(data, dtype=np.uint8)
    if fmt == 16:
        if n_values is None:
            if buf.size % 2:
                raise WfdbError("format 16 payload has odd byte length")
            n_values = buf.size // 2
        if buf.size < 2 * n_values:
            raise WfdbError(f"truncated payload: need {2 * n_values} bytes, got {buf.size}")
        if buf.size != 2 * n_values:
            raise WfdbError(f"payload length {buf.size} does not match {n_values} fmt-16 samples")
        return buf[: 2 * n_values].view("<i2").astype(np.int32)
    if fmt != 212:
        raise WfdbError(f"unsupported signal format {fmt}")

    if n_values is None:
        n_values = (buf.size // 3) * 2 + (1 if buf.size % 3 == 2 else 0)
    allowed = _expected_bytes(212, n_values)
    if buf.size < min(allowed):
        raise WfdbError(f"truncated payload: need {min(allowed)} bytes, got {buf.size}")
    if buf.size not in allowed:
        raise WfdbError(f"payload length {buf.size} does not match {n_values} fmt-212 samples")

    padded = np.zeros(3 * ((n_values + 1) // 2), dtype=np.int32)
    padded[: buf.size] = buf[: padded.size]
    triples = padded.reshape(-1, 3)
    out = np.empty(triples.shape[0] * 2, dtype=np.int32)
    out[0::2] = triples[:, 0] | ((triples[:, 1] & 0x0F) << 8)
    out[1::2] = triples[:, 2] | ((triples[:, 1] & 0xF0) << 4)
    out = out[:n_values]
    out[out > 2047] -= 4096
    return out


def encode_counts(counts: Sequence[int] | np.ndarray, fmt: int) -> bytes:
    c = np.asarray(counts, dtype=np.int64)
    if fmt == 16:
        if c.size and (c.min() < -32768 or c.max() > 32767):
            raise WfdbError("count out of 16-bit range")
        return c.astype("<i2").tobytes()
    if fmt != 212:
        raise WfdbError(f"unsupported signal format {fmt}")
    if c.size and (c.min() < -2048 or c.max() > 2047):
        raise WfdbError("count out of 12-bit range")
    u = (c & 0xFFF).astype(np.uint16)
    if u.size % 2:
        u = np.append(u, np.uint16(0))
    pairs = u.reshape(-1, 2)
    out = np.empty((pairs.shape[0], 3), dtype=np.uint8)
    out[:, 0] = pairs[:, 0] & 0xFF
    out[:, 1] = ((pairs[:, 0] >> 8) & 0x0F) | ((pairs[:, 1] >> 4) & 0xF0)
    out[:, 2] = pairs[:, 1] & 0xFF
    raw = out.tobytes()
    # odd count: the final frame carries only the first sample's two bytes
    return raw[:-1] if c.size % 2 else raw


def decode_samples(data: bytes, info: HeaderInfo) -> np.ndarray:
    """Decode a ``.dat`` payload into physical units.

    Returns a 1-D array for single-signal records and an
    ``(n_samples, n_sig)`` array otherwise.
    """
    if info.n_sig == 0:
        return np.zeros(0)
    fmts = {s.fmt for s in info.signals}
    if len(fmts) != 1:
        raise WfdbError("mixed storage formats within one file are not supported")
    spec0 = info.signals[0]
    payload = data[spec0.byte_offset :]
    n_values = info.n_samples * info.n_sig if info.n_samples else None
    counts = decode_counts(payload, spec0.fmt, n_values)
    if counts.size % info.n_sig:
        raise WfdbError("payload does not hold a whole number of frames")
    frames = counts.reshape(-1, info.n_sig).astype(np.float64)
    gains = np.array([s.gain for s in info.signals])
    baselines = np.array([s.baseline for s in info.signals], dtype=np.float64)
    volts = (frames - baselines) / gains
    return volts[:, 0] if info.n_sig == 1 else volts


# ---------------------------------------------------------------------------
# Annotations


def read_annotations(data: bytes) -> list[tuple[int, int]]:
    """Decode an MIT-format annotation stream into ``(sample, code)`` pairs."""
    buf = memoryview(data)
    pos, t, out = 0, 0, []
    while pos + 2 <= len(buf):
        (word,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        code, interval = word >> 10, word & 0x3FF
        if code == 0 and interval == 0:
            break
        if code == _ANN_SKIP:
            if pos + 4 > len(buf):
                raise WfdbError("truncated SKIP annotation")
            hi, lo = struct.unpack_from("<hH", buf, pos)
            pos += 4
            t += (hi << 16) | lo
            continue
        if code in (_ANN_NUM, _ANN_SUB, _ANN_CHN):
            continue
        if code == _ANN_AUX:
            pos += interval + (interval & 1)
            continue
        t += interval
        out.append((t, code))
    return out


def parse_apnea_annotations(data: bytes) -> np.ndarray:
    """Per-minute apnea labels (1 = apnea) from an ``.apn`` annotation stream."""
    labels = []
    last = None
    for t, code in read_annotations(data):
        if code not in _APNEA_CODES:
            raise WfdbError(f"unknown annotation code {code} at sample {t}")
        if last is not None and t <= last:
            raise WfdbError(f"non-monotonic annotation time {t} after {last}")
        last = t
        labels.append(_APNEA_CODES[code])
    return np.asarray(labels, dtype=np.int8)


def write_annotations(items: Iterable[tuple[int, int]]) -> bytes:
    out = bytearray()
    t = 0
    for sample, code in items:
        delta = sample - t
        if delta < 0 or delta > 0x3FF:
            out += struct.pack("<H", _ANN_SKIP << 10)
            out += struct.pack("<hH", delta >> 16, delta & 0xFFFF)
            delta = 0
        out += struct.pack("<H", (code << 10) | delta)
        t = sample
    out += b"\x00\x00"
    return bytes(out)


def write_apnea_annotations(labels: Sequence[int], fs: float) -> bytes:
    per_min = int(round(60 * fs))
    return write_annotations(
        (i * per_min, ANN_APNEA if lab else ANN_NORMAL) for i, lab in enumerate(labels)
    )


# ---------------------------------------------------------------------------
# Records on disk


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_record(directory: str | Path, record_id: str, channel: int = 0) -> EcgRecord:
    """Load ``<record_id>.hea/.dat`` and, when present, ``<record_id>.apn``.

    Labels whose minute starts past the end of the signal are dropped.
    """
    directory = Path(directory)
    info = parse_header((directory / f"{record_id}.hea").read_bytes())
    if info.n_sig == 0:
        raise WfdbError(f"{record_id}: header declares no signals")
    dat = directory / info.signals[channel].file_name
    samples = decode_samples(dat.read_bytes(), info)
    if samples.ndim == 2:
        samples = samples[:, channel]
    apn = directory / f"{record_id}.apn"
    labels = parse_apnea_annotations(apn.read_bytes()) if apn.exists() else np.zeros(0, np.int8)
    n_fit = int(np.ceil(samples.size / (60 * info.fs)))
    return EcgRecord(record_id=record_id, fs=info.fs, samples=samples, labels=labels[:n_fit])


def write_record(directory: str | Path, record: EcgRecord, fmt: int = 212, gain: float = 200.0) -> None:
    directory = Path(directory)
    counts = np.rint(record.samples * gain).astype(np.int64)
    lo, hi = (-2048, 2047) if fmt == 212 else (-32768, 32767)
    counts = np.clip(counts, lo, hi)
    info = HeaderInfo(
        record_name=record.record_id,
        n_sig=1,
        fs=record.fs,
        n_samples=int(counts.size),
        signals=(SignalSpec(file_name=f"{record.record_id}.dat", fmt=fmt, gain=gain,
                            adc_res=12 if fmt == 212 else 16,
                            init_value=int(counts[0]) if counts.size else 0,
                            checksum=int(counts.sum()) & 0xFFFF if counts.size else 0,
                            description="ECG"),),
    )
    atomic_write(directory / f"{record.record_id}.dat", encode_counts(counts, fmt))
    atomic_write(directory / f"{record.record_id}.hea", write_header(info).encode("ascii"))
    atomic_write(directory / f"{record.record_id}.apn", write_apnea_annotations(record.labels, record.fs))


def list_records(directory: str | Path) -> list[str]:
    """Record names from a ``RECORDS`` file, else every ``*.hea`` stem, sorted."""
    directory = Path(directory)
    listing = directory / "RECORDS"
    if listing.exists():
        names = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
    else:
        names = [p.stem for p in directory.glob("*.hea")]
    return sorted(set(names))


# ---------------------------------------------------------------------------
# Feature container
#
# little-endian layout:
#   magic "APNF" | u16 version | u32 n_segments | u16 n_channels | u16 n_points
#   per segment: u16 id_len | id utf-8 | i32 minute | u8 label | u32 beat_count
#                | f64[n_channels] mean | f64[n_channels] std | f64[n_channels * n_points]
#   u32 crc32 of everything above


def write_feature_bytes(segments: Sequence, n_channels: int | None = None, n_points: int = 900) -> bytes:
    if segments:
        n_channels = segments[0].channels.shape[0]
        n_points = segments[0].channels.shape[1]
    elif n_channels is None:
        n_channels = 4
    out = io.BytesIO()
    out.write(FEATURE_MAGIC)
    out.write(struct.pack("<HIHH", FEATURE_VERSION, len(segments), n_channels, n_points))
    for seg in segments:
        ch = np.asarray(seg.channels, dtype="<f8")
        if ch.shape != (n_channels, n_points):
            raise ValueError(f"segment {seg.record_id}:{seg.minute_index} has shape {ch.shape}")
        rid = seg.record_id.encode("utf-8")
        out.write(struct.pack("<H", len(rid)))
        out.write(rid)
        out.write(struct.pack("<iBI", seg.minute_index, seg.label, seg.beat_count))
        out.write(np.asarray(seg.channel_mean, dtype="<f8").tobytes())
        out.write(np.asarray(seg.channel_std, dtype="<f8").tobytes())
        out.write(ch.tobytes())
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def read_feature_bytes(data: bytes) -> list:
    from .feature_extract import FeatureSegment

    if len(data) < 18 or data[:4] != FEATURE_MAGIC:
        raise FeatureFileError("not a feature file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FeatureFileError("checksum mismatch")
    version, count, n_ch, n_pts = struct.unpack_from("<HIHH", body, 4)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported feature file version {version}")
    pos = 14
    segments = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        rid = body[pos : pos + id_len].decode("utf-8")
        pos += id_len
        minute, label, beats = struct.unpack_from("<iBI", body, pos)
        pos += 9
        mean = np.frombuffer(body, "<f8", n_ch, pos).astype(np.float64)
        pos += 8 * n_ch
        std = np.frombuffer(body, "<f8", n_ch, pos).astype(np.float64)
        pos += 8 * n_ch
        ch = np.frombuffer(body, "<f8", n_ch * n_pts, pos).reshape(n_ch, n_pts).astype(np.float64)
        pos += 8 * n_ch * n_pts
        segments.append(FeatureSegment(rid, minute, label, ch, beats, mean, std))
    if pos != len(body):
        raise FeatureFileError("trailing bytes after last segment")
    return segments


def write_feature_file(path: str | Path, segments: Sequence, n_channels: int | None = None) -> None:
    atomic_write(path, write_feature_bytes(segments, n_channels))


def read_feature_file(path: str | Path) -> list:
    return read_feature_bytes(Path(path).read_bytes())


def export_feature_csv(path: str | Path, segments: Sequence) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment_id", "label", "channel", "idx", "value"])
    for seg in segments:
        sid = f"{seg.record_id}:{seg.minute_index}"
        for c, row in enumerate(seg.channels):
            for j, v in enumerate(row):
                w.writerow([sid, seg.label, c, j, repr(float(v))])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def with_labels(record: EcgRecord, labels: Sequence[int]) -> EcgRecord:
    return replace(record, labels=np.asarray(labels, dtype=np.int8))
