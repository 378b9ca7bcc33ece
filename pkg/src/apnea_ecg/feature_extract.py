"""Five-minute feature segments: beat series -> four channels of 900 points."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .peak_detect import BeatSeries
from .wfdb_io import EcgRecord

N_POINTS = 900
WINDOW_S = 300.0
CONTEXT_BEFORE = 2  # minutes
CONTEXT_AFTER = 2
MIN_KNOTS = 4
CHANNEL_NAMES = ("rr", "r_amp", "ss", "s_amp")
QUERY_TIMES = WINDOW_S * np.arange(N_POINTS) / (N_POINTS - 1)


class FeatureSet(str, Enum):
    R_ONLY = "r"
    R_AND_S = "rs"

    @property
    def n_channels(self) -> int:
        return 2 if self is FeatureSet.R_ONLY else 4


class InsufficientContext(ValueError):
    def __init__(self, minute_index: int, reason: str = ""):
        super().__init__(f"minute {minute_index}: insufficient context {reason}".strip())
        self.minute_index = minute_index


class TooFewBeats(ValueError):
    pass


@dataclass
class FeatureSegment:
    record_id: str
    minute_index: int
    label: int
    channels: np.ndarray  # (n_channels, 900): RR, R-amp, SS, S-amp
    beat_count: int
    channel_mean: np.ndarray = None  # pre-normalisation moments, for de-normalised stats
    channel_std: np.ndarray = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        n = self.channels.shape[0]
        self.channel_mean = np.zeros(n) if self.channel_mean is None else np.asarray(self.channel_mean, float)
        self.channel_std = np.ones(n) if self.channel_std is None else np.asarray(self.channel_std, float)

    @property
    def raw_channels(self) -> np.ndarray:
        return self.channels * self.channel_std[:, None] + self.channel_mean[:, None]

    def select(self, feature_set: FeatureSet) -> "FeatureSegment":
        k = feature_set.n_channels
        return FeatureSegment(self.record_id, self.minute_index, self.label, self.channels[:k].copy(),
                              self.beat_count, self.channel_mean[:k].copy(), self.channel_std[:k].copy())

    def __eq__(self, other):
        if not isinstance(other, FeatureSegment):
            return NotImplemented
        return (
            (self.record_id, self.minute_index, self.label, self.beat_count)
            == (other.record_id, other.minute_index, other.label, other.beat_count)
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.channel_mean, other.channel_mean)
            and np.array_equal(self.channel_std, other.channel_std)
        )


@dataclass
class BuildReport:
    n_labeled: int = 0
    n_segments: int = 0
    rejected_context: int = 0
    rejected_beats: int = 0
    per_record: dict = field(default_factory=dict)
    label_counts: Counter = field(default_factory=Counter)

    @property
    def accounted(self) -> int:
        return self.n_segments + self.rejected_context + self.rejected_beats

    def as_dict(self) -> dict:
        return {
            "n_labeled": self.n_labeled,
            "n_segments": self.n_segments,
            "rejected_context": self.rejected_context,
            "rejected_beats": self.rejected_beats,
            "unexplained": self.n_labeled - self.accounted,
            "sa_segments": self.label_counts.get(1, 0),
            "non_sa_segments": self.label_counts.get(0, 0),
            "per_record": self.per_record,
        }


def assemble_window(record: EcgRecord, minute_index: int) -> tuple[int, int]:
    """Sample range [start, stop) of the 5-minute window around ``minute_index``."""
    if not 0 <= minute_index < record.n_labeled_minutes:
        raise ValueError(f"minute {minute_index} has no label")
    per_min = int(round(60 * record.fs))
    start = (minute_index - CONTEXT_BEFORE) * per_min
    stop = (minute_index + 1 + CONTEXT_AFTER) * per_min
    if start < 0:
        raise InsufficientContext(minute_index, "before")
    if stop > record.samples.size:
        raise InsufficientContext(minute_index, "after")
    return start, stop


def extract_channels(beats: BeatSeries, start: int, stop: int) -> tuple[list[tuple[np.ndarray, np.ndarray]], int]:
    """(time, value) series for RR, R-amp, SS and S-amp inside [start, stop).

    Only beats whose R and S both fall inside the window are used. Interval
    series are stamped at the later peak of each pair; times are seconds
    from the window start.
    """
    k = beats.n_paired
    r, s = beats.r_idx[:k], beats.s_idx
    inside = (r >= start) & (r < stop) & (s >= start) & (s < stop)
    r, s = r[inside], s[inside]
    ra, sa = beats.r_amp[:k][inside], beats.s_amp[inside]
    if r.size < MIN_KNOTS:
        raise TooFewBeats(f"{r.size} beats in window, need {MIN_KNOTS}")
    fs = beats.fs
    tr, ts = (r - start) / fs, (s - start) / fs
    series = [
        (tr[1:], np.diff(r) / fs),
        (tr, ra),
        (ts[1:], np.diff(s) / fs),
        (ts, sa),
    ]
    return series, int(r.size)


def natural_spline_coeffs(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Second derivatives at the knots of the natural cubic spline through (t, y)."""
    n = t.size
    h = np.diff(t)
    m = np.zeros(n)
    if n < 3:
        return m
    rhs = 6.0 * (np.diff(y[1:]) / h[1:] - np.diff(y[:-1]) / h[:-1])
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = h[1:-1]
    ab[1, :] = 2.0 * (h[:-1] + h[1:])
    ab[2, :-1] = h[1:-1]
    m[1:-1] = solve_banded((1, 1), ab, rhs)
    return m


def eval_natural_spline(t: np.ndarray, y: np.ndarray, m: np.ndarray, q: np.ndarray) -> np.ndarray:
    q = np.clip(q, t[0], t[-1])
    i = np.clip(np.searchsorted(t, q, side="right") - 1, 0, t.size - 2)
    h = t[i + 1] - t[i]
    a = (t[i + 1] - q) / h
    b = (q - t[i]) / h
    return (a * y[i] + b * y[i + 1]
            + ((a**3 - a) * m[i] + (b**3 - b) * m[i + 1]) * h * h / 6.0)


def interpolate_to_900(times, values, query=QUERY_TIMES) -> np.ndarray:
    """Natural cubic spline through the knots, sampled on the 900-point grid.

    Queries outside the knot span take the nearest boundary knot value.
    """
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.size != y.size:
        raise ValueError("times and values differ in length")
    if t.size < MIN_KNOTS:
        raise TooFewBeats(f"{t.size} knots, need {MIN_KNOTS}")
    d = np.diff(t)
    if np.any(d == 0):
        raise ValueError("duplicate knot times")
    if np.any(d < 0):
        raise ValueError("knot times must be increasing")
    m = natural_spline_coeffs(t, y)
    out = eval_natural_spline(t, y, m, np.asarray(query, dtype=np.float64))
    # exact knot reproduction where grid and knots coincide
    hit = np.searchsorted(t, query)
    hit = np.clip(hit, 0, t.size - 1)
    eq = t[hit] == query
    out[eq] = y[hit[eq]]
    return out


def normalize(channel) -> np.ndarray:
    """Z-score with the population std; a zero-variance channel becomes all zeros."""
    x = np.asarray(channel, dtype=np.float64)
    mu = x.mean()
    c = x - mu
    c -= c.mean()  # second pass removes the rounding left by a large offset
    sd = c.std()
    if sd <= 1e-12 * max(1.0, abs(mu)):
        return np.zeros_like(x)
    return c / sd


def make_segment(record: EcgRecord, beats: BeatSeries, minute_index: int,
                 feature_set: FeatureSet = FeatureSet.R_AND_S) -> FeatureSegment:
    start, stop = assemble_window(record, minute_index)
    series, n_beats = extract_channels(beats, start, stop)
    raw = np.stack([interpolate_to_900(t, v) for t, v in series[: feature_set.n_channels]])
    mean = raw.mean(axis=1)
    std = raw.std(axis=1)
    chans = np.stack([normalize(c) for c in raw])
    std = np.where(np.all(chans == 0, axis=1), 0.0, std)
    return FeatureSegment(record.record_id, minute_index, int(record.labels[minute_index]),
                          chans, n_beats, mean, std)


def build_record_segments(record: EcgRecord, beats: BeatSeries,
                          feature_set: FeatureSet = FeatureSet.R_AND_S) -> tuple[list[FeatureSegment], dict]:
    segments, stats = [], {"labeled": record.n_labeled_minutes, "context": 0, "beats": 0, "segments": 0}
    for minute in range(record.n_labeled_minutes):
        try:
            segments.append(make_segment(record, beats, minute, feature_set))
        except InsufficientContext:
            stats["context"] += 1
        except TooFewBeats:
            stats["beats"] += 1
    stats["segments"] = len(segments)
    return segments, stats


def build_dataset(records: Sequence[EcgRecord], beats: Mapping[str, BeatSeries],
                  feature_set: FeatureSet = FeatureSet.R_AND_S) -> tuple[list[FeatureSegment], BuildReport]:
    """One segment per labelled minute with full context and enough beats, ordered by (record, minute)."""
    feature_set = FeatureSet(feature_set)
    report = BuildReport()
    out: list[FeatureSegment] = []
    for rec in sorted(records, key=lambda r: r.record_id):
        segs, stats = build_record_segments(rec, beats[rec.record_id], feature_set)
        out.extend(segs)
        merge_stats(report, rec.record_id, stats, segs)
    return out, report


def merge_stats(report: BuildReport, record_id: str, stats: dict, segs: Sequence[FeatureSegment]) -> None:
    report.n_labeled += stats["labeled"]
    report.n_segments += stats["segments"]
    report.rejected_context += stats["context"]
    report.rejected_beats += stats["beats"]
    report.per_record[record_id] = dict(stats)
    report.label_counts.update(s.label for s in segs)
