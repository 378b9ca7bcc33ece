"""R-peak detection, RR-series correction and S-peak location."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d

from .metrics_eval import ConfusionCounts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BeatSeries:
    r_idx: np.ndarray
    r_amp: np.ndarray
    s_idx: np.ndarray
    s_amp: np.ndarray
    fs: float

    def __post_init__(self):
        for name in ("r_idx", "s_idx"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.size > 1 and np.any(np.diff(arr) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, arr)
        for name in ("r_amp", "s_amp"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.s_idx.size > self.r_idx.size:
            raise ValueError("more S peaks than R peaks")

    @property
    def n_paired(self) -> int:
        return int(self.s_idx.size)


@dataclass(frozen=True)
class HamiltonParams:
    envelope_ms: float = 80.0
    refractory_ms: float = 200.0
    threshold: float = 0.3125
    searchback_factor: float = 1.5
    init_seconds: float = 8.0
    buffer_len: int = 8
    fiducial_ms: float = 100.0


@dataclass(frozen=True)
class RrBounds:
    rr_min: float = 0.3
    rr_max: float = 2.0
    window: int = 5

    def __post_init__(self):
        if not 0 < self.rr_min < self.rr_max:
            raise ValueError("need 0 < rr_min < rr_max")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and at least 3")


@dataclass(frozen=True)
class RrCorrection:
    r_idx: np.ndarray
    ok: bool
    merged: int = 0
    inserted: int = 0
    unfixable: int = 0
    skipped: bool = False


# ---------------------------------------------------------------------------
# R peaks


def _local_maxima(x: np.ndarray) -> np.ndarray:
    """Indices of strict-rise / non-rise local maxima (plateaus report their first sample)."""
    if x.size < 3:
        return np.zeros(0, dtype=np.int64)
    d = np.diff(x)
    rising = np.concatenate(([False], d > 0))
    falling = np.concatenate((d < 0, [False]))
    # resolve plateaus: carry "rose into" through flat stretches
    idx = np.flatnonzero(rising)
    cand = []
    for i in idx:
        j = i
        while j + 1 < x.size and x[j + 1] == x[i]:
            j += 1
        if falling[j]:
            cand.append(i)
    return np.unique(np.asarray(cand, dtype=np.int64))


def hamilton_envelope(signal: np.ndarray, fs: float, envelope_ms: float = 80.0) -> np.ndarray:
    d = np.abs(np.diff(signal, prepend=signal[:1]))
    w = max(1, int(round(envelope_ms * fs / 1000.0)))
    kernel = np.ones(w) / w
    # centred average keeps the envelope peak aligned with the slope burst
    return np.convolve(d, kernel, mode="same")


def detect_r_peaks(signal, fs: float, params: HamiltonParams = HamiltonParams()) -> np.ndarray:
    """Hamilton-style QRS detector on a band-passed signal.

    Envelope peaks are classified against an adaptive threshold between the
    running QRS and noise peak levels; a refractory period suppresses double
    detections and a search-back at half threshold recovers missed beats.
    Each accepted envelope peak is snapped to the signal maximum nearby.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size < 2 * fs:
        raise ValueError(f"signal too short ({x.size / fs:.2f} s) to initialise thresholds")
    env = hamilton_envelope(x, fs, params.envelope_ms)
    refractory = int(round(params.refractory_ms * fs / 1000.0))
    peaks = _local_maxima(env)
    # ignore envelope peaks that have a larger peak within the refractory span
    peaks = peaks[env[peaks] >= maximum_filter1d(env, 2 * refractory + 1, mode="nearest")[peaks]]
    scale = np.max(np.abs(x))
    if peaks.size == 0 or scale == 0:
        return np.zeros(0, dtype=np.int64)

    snap = max(1, int(round(params.fiducial_ms * fs / 1000.0)))
    sec = int(round(fs))
    n_init = max(2, min(int(params.init_seconds), int(x.size // sec)))
    init_levels = [env[i * sec : (i + 1) * sec].max() for i in range(n_init)]
    qrs_buf = list(np.sort(init_levels)[-params.buffer_len :])
    noise_buf = [0.0] * params.buffer_len
    rr_buf: list[int] = []
    floor = 1e-9 * env.max()

    def threshold() -> float:
        qp, np_ = np.median(qrs_buf), np.median(noise_buf)
        return np_ + params.threshold * (qp - np_)

    beats: list[int] = []
    beat_level: list[float] = []
    pending: list[int] = []  # sub-threshold peaks since the last beat, for search-back

    def accept(p: int) -> None:
        if beats:
            rr_buf.append(p - beats[-1])
            del rr_buf[: -params.buffer_len]
        beats.append(p)
        beat_level.append(env[p])
        qrs_buf.append(env[p])
        del qrs_buf[: -params.buffer_len]
        pending.clear()

    for p in peaks:
        level = env[p]
        th = threshold()
        if level > th and level > floor:
            if beats and p - beats[-1] < refractory:
                if level > beat_level[-1]:
                    # larger peak inside the refractory window replaces the last beat
                    beats.pop()
                    beat_level.pop()
                    if rr_buf and beats:
                        rr_buf.pop()
                    accept(p)
                continue
            if beats and rr_buf and pending:
                gap = p - beats[-1]
                if gap > params.searchback_factor * np.median(rr_buf):
                    ok = [q for q in pending if q - beats[-1] >= refractory and p - q >= refractory
                          and env[q] > 0.5 * th]
                    if ok:
                        accept(max(ok, key=lambda q: env[q]))
            accept(p)
        else:
            noise_buf.append(level)
            del noise_buf[: -params.buffer_len]
            pending.append(p)

    out = []
    for p in beats:
        lo, hi = max(0, p - snap), min(x.size, p + snap + 1)
        out.append(lo + int(np.argmax(x[lo:hi])))
    out = np.unique(np.asarray(out, dtype=np.int64))
    # snapping can pull two detections together; keep the taller inside the refractory gap
    keep: list[int] = []
    for p in out:
        if keep and p - keep[-1] < refractory:
            if x[p] > x[keep[-1]]:
                keep[-1] = p
            continue
        keep.append(int(p))
    return np.asarray(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# RR correction


def _local_median(rr: np.ndarray, i: int, window: int) -> float:
    h = window // 2
    return float(np.median(rr[max(0, i - h) : i + h + 1]))


def _split_count(interval: int, target: float, lo: float, hi: float) -> int | None:
    """Number of equal parts for ``interval`` samples, all within [lo, hi] after rounding."""
    best = None
    n_max = int(interval // lo) if lo > 0 else interval
    for n in range(2, max(2, n_max) + 1):
        pts = np.rint(np.linspace(0, interval, n + 1)).astype(np.int64)
        d = np.diff(pts)
        if d.min() < lo or d.max() > hi:
            continue
        score = abs(n - interval / target)
        if best is None or score < best[0]:
            best = (score, n)
    return None if best is None else best[1]


def correct_rr(r_idx, fs: float, bounds: RrBounds = RrBounds()) -> RrCorrection:
    """Repair RR outliers with a sliding local median.

    Intervals shorter than ``rr_min`` are merged into the neighbour that
    brings the merged interval closest to the local median (earlier
    neighbour on ties). Intervals longer than ``rr_max`` get
    ``round(interval / median) - 1`` equally spaced beats inserted, adjusted
    so every part lands within bounds; if no split does, the gap is left and
    counted as unfixable.
    """
    r = np.asarray(r_idx, dtype=np.int64)
    if r.size > 1 and np.any(np.diff(r) <= 0):
        raise ValueError("r_idx must be strictly increasing")
    if r.size < bounds.window + 1:
        log.warning("correct_rr: %d peaks is fewer than window + 1; unchanged", r.size)
        return RrCorrection(r.copy(), ok=False, skipped=True)

    lo, hi = bounds.rr_min * fs, bounds.rr_max * fs
    beats = r.tolist()
    merged = inserted = unfixable = 0

    # pass 1: merge too-short intervals, leftmost first
    while len(beats) > 2:
        rr = np.diff(beats)
        short = np.flatnonzero(rr < lo)
        if short.size == 0:
            break
        i = int(short[0])
        m = _local_median(rr, i, bounds.window)
        options = []
        if i > 0:
            options.append((abs(rr[i - 1] + rr[i] - m), 0, i))  # drop beat at start of interval i
        if i < rr.size - 1:
            options.append((abs(rr[i] + rr[i + 1] - m), 1, i + 1))  # drop beat at its end
        _, _, drop = min(options)
        del beats[drop]
        merged += 1
    if len(beats) == 2 and beats[1] - beats[0] < lo:
        beats.pop()
        merged += 1

    # pass 2: split too-long intervals
    rr = np.diff(beats)
    out = [beats[0]] if beats else []
    for i, d in enumerate(rr):
        if d > hi:
            m = _local_median(rr, i, bounds.window)
            n = _split_count(int(d), m, lo, hi)
            if n is None:
                unfixable += 1
            else:
                pts = np.rint(np.linspace(beats[i], beats[i + 1], n + 1)).astype(np.int64)
                out.extend(int(p) for p in pts[1:-1])
                inserted += n - 1
        out.append(beats[i + 1])

    return RrCorrection(np.asarray(out, dtype=np.int64), ok=unfixable == 0,
                        merged=merged, inserted=inserted, unfixable=unfixable)


# ---------------------------------------------------------------------------
# S peaks


def detect_s_peaks(signal, r_idx) -> np.ndarray:
    """First local minimum at or after each R peak.

    From each R the walk descends while the next sample is strictly lower.
    An R whose descent runs into the end of the signal yields no S, and the
    scan stops there, as later R peaks sit on the same falling tail.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = x.size
    # stop[i]: first j >= i with x[j] <= x[j+1]; n marks "runs off the end"
    stop = np.full(n, n, dtype=np.int64)
    for j in range(n - 2, -1, -1):
        stop[j] = j if x[j] <= x[j + 1] else stop[j + 1]
    out = []
    for i in np.asarray(r_idx, dtype=np.int64):
        if i + 1 >= n or stop[i] >= n:
            break
        out.append(int(stop[i]))
    return np.asarray(out, dtype=np.int64)


def beats_from_signal(filtered, fs: float, bounds: RrBounds = RrBounds(),
                      params: HamiltonParams = HamiltonParams(),
                      amp_source=None) -> tuple[BeatSeries, RrCorrection]:
    """Full beat chain: R detection, RR correction, S location, amplitude readout.

    Amplitudes come from ``amp_source`` when given (e.g. the raw signal),
    otherwise from ``filtered``.
    """
    filtered = np.asarray(filtered, dtype=np.float64)
    r = detect_r_peaks(filtered, fs, params)
    corr = correct_rr(r, fs, bounds)
    r = corr.r_idx
    while True:
        s = detect_s_peaks(filtered, r)
        # an R that sits on a minimum, or inside the previous beat's descent, is not a beat
        bad = s <= r[: s.size]
        if s.size > 1:
            bad[1:] |= s[1:] <= s[:-1]
        if not bad.any():
            break
        r = np.delete(r, np.flatnonzero(bad))
    src = filtered if amp_source is None else np.asarray(amp_source, dtype=np.float64)
    return BeatSeries(r, src[r], s, src[s], fs), corr


# ---------------------------------------------------------------------------
# Evaluation against annotated beats


def match_peaks(detected, truth, tol: int) -> list[tuple[int, int]]:
    """Greedy one-to-one matching: each truth beat, in order, takes its nearest free detection."""
    det = np.asarray(detected, dtype=np.int64)
    used = np.zeros(det.size, dtype=bool)
    pairs = []
    for ti, t in enumerate(np.asarray(truth, dtype=np.int64)):
        lo = np.searchsorted(det, t - tol, side="left")
        hi = np.searchsorted(det, t + tol, side="right")
        best = None
        for j in range(lo, hi):
            if used[j]:
                continue
            if best is None or abs(det[j] - t) < abs(det[best] - t):
                best = j
        if best is not None:
            used[best] = True
            pairs.append((ti, best))
    return pairs


def evaluate_peak_detection(detected, truth, tolerance_ms: float = 40.0, fs: float = 100.0) -> ConfusionCounts:
    det = np.sort(np.asarray(detected, dtype=np.int64))
    tru = np.asarray(truth, dtype=np.int64)
    tol = int(np.floor(tolerance_ms * fs / 1000.0 + 1e-9))
    tp = len(match_peaks(det, tru, tol))
    return ConfusionCounts(tp=tp, tn=0, fp=int(det.size - tp), fn=int(tru.size - tp))
