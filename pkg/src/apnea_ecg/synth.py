"""Synthetic single-lead ECG with exact R/S fiducials, used as a test oracle."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .peak_detect import BeatSeries
from .wfdb_io import EcgRecord

R_OFFSET_S = 0.2
S_LAG_S = 0.040


@dataclass(frozen=True)
class SynthSpec:
    fs: float = 100.0
    duration: float = 60.0
    heart_rate: float | tuple[float, ...] = 60.0
    r_amp: float = 1.0
    s_amp: float = 0.3
    noise_snr_db: float | None = None
    seed: int = 0
    rr_jitter: float = 0.0  # std of beat-to-beat RR perturbation, seconds
    width: float = 0.015  # Gaussian sigma of both bumps, seconds

    def __post_init__(self):
        rates = np.atleast_1d(self.heart_rate)
        if rates.size == 0 or rates.min() < 20 or rates.max() > 240:
            raise ValueError("heart rate must lie within [20, 240] bpm")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


def beat_times(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Beat onset times; each R centre sits ``R_OFFSET_S`` after its onset."""
    rates = np.atleast_1d(np.asarray(spec.heart_rate, dtype=np.float64))
    times = []
    t, k = 0.0, 0
    while t + R_OFFSET_S + 3 * spec.width + S_LAG_S < spec.duration:
        times.append(t)
        rr = 60.0 / rates[k % rates.size]
        if spec.rr_jitter:
            rr = max(rr + rng.normal(0.0, spec.rr_jitter), 0.25)
        t += rr
        k += 1
    return np.asarray(times)


def _render(n: int, fs: float, centres: np.ndarray, amps: np.ndarray, width: float) -> np.ndarray:
    x = np.zeros(n)
    half = int(np.ceil(5 * width * fs))
    for c, a in zip(centres, amps):
        lo, hi = max(0, int(c * fs) - half), min(n, int(c * fs) + half + 2)
        t = np.arange(lo, hi) / fs
        x[lo:hi] += a * np.exp(-0.5 * ((t - c) / width) ** 2)
    return x


def _fiducials(clean: np.ndarray, fs: float, r_centres: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = max(2, int(round(0.1 * fs)))
    r_idx, s_idx = [], []
    for c in r_centres:
        i = int(round(c * fs))
        lo, hi = max(0, i - half), min(clean.size, i + half + 1)
        win = clean[lo:hi]
        r_idx.append(lo + int(np.argmax(win)))
        s_idx.append(lo + int(np.argmin(win)))
    r_idx, s_idx = np.asarray(r_idx, dtype=np.int64), np.asarray(s_idx, dtype=np.int64)
    if r_idx.size:
        assert np.all(s_idx > r_idx), "S minimum must follow the R maximum"
        assert np.all(np.diff(r_idx) > 0)
    return r_idx, s_idx


def add_noise(clean: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = np.mean(clean**2)
    sigma = np.sqrt(power / 10 ** (snr_db / 10.0))
    return clean + rng.normal(0.0, sigma, clean.size)


def generate(spec: SynthSpec, record_id: str = "synth") -> tuple[EcgRecord, BeatSeries]:
    """Render a Gaussian R/S bump train and return it with its ground truth beats."""
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * spec.fs))
    onsets = beat_times(spec, rng)
    r_c = onsets + R_OFFSET_S
    clean = _render(n, spec.fs, r_c, np.full(r_c.size, spec.r_amp), spec.width)
    clean -= _render(n, spec.fs, r_c + S_LAG_S, np.full(r_c.size, spec.s_amp), spec.width)
    r_idx, s_idx = _fiducials(clean, spec.fs, r_c)
    signal = clean if spec.noise_snr_db is None else add_noise(clean, spec.noise_snr_db, rng)
    truth = BeatSeries(r_idx, clean[r_idx], s_idx, clean[s_idx], spec.fs)
    return EcgRecord(record_id, spec.fs, signal), truth


def generate_labeled_pair(
    spec_sa: SynthSpec,
    spec_non: SynthSpec,
    n_minutes: int,
    record_id: str = "synth",
    first_label: int = 1,
) -> tuple[EcgRecord, BeatSeries]:
    """Alternate one-minute stretches from the two specs, labelling SA minutes 1.

    Beats follow one continuous rhythm; each beat takes the amplitudes (and
    jitter) of the minute its R peak falls in.
    """
    fs = spec_sa.fs
    if spec_non.fs != fs:
        raise ValueError("both specs must share a sampling rate")
    labels = np.array([(first_label + i) % 2 for i in range(n_minutes)], dtype=np.int8)
    if n_minutes == 0:
        empty = np.zeros(0, dtype=np.int64)
        return EcgRecord(record_id, fs, np.zeros(0)), BeatSeries(empty, np.zeros(0), empty, np.zeros(0), fs)

    rng = np.random.default_rng(spec_sa.seed)
    duration = 60.0 * n_minutes
    n = int(round(duration * fs))
    r_c, r_a, s_a = [], [], []
    t = 0.0
    while True:
        centre = t + R_OFFSET_S
        if centre + S_LAG_S + 3 * spec_sa.width >= duration:
            break
        minute = int(centre // 60)
        spec = spec_sa if labels[minute] else spec_non
        r_c.append(centre)
        r_a.append(spec.r_amp)
        s_a.append(spec.s_amp)
        rates = np.atleast_1d(spec.heart_rate)
        rr = 60.0 / float(rates[len(r_c) % rates.size])
        if spec.rr_jitter:
            rr = max(rr + rng.normal(0.0, spec.rr_jitter), 0.25)
        t += rr
    r_c, r_a, s_a = map(np.asarray, (r_c, r_a, s_a))
    width = spec_sa.width
    clean = _render(n, fs, r_c, r_a, width) - _render(n, fs, r_c + S_LAG_S, s_a, width)
    r_idx, s_idx = _fiducials(clean, fs, r_c)

    signal = clean.copy()
    for lab, spec in ((1, spec_sa), (0, spec_non)):
        if spec.noise_snr_db is None:
            continue
        per_min = int(round(60 * fs))
        for m in np.flatnonzero(labels == lab):
            sl = slice(m * per_min, (m + 1) * per_min)
            signal[sl] = add_noise(clean[sl], spec.noise_snr_db, rng)
    truth = BeatSeries(r_idx, clean[r_idx], s_idx, clean[s_idx], fs)
    return EcgRecord(record_id, fs, signal, labels), truth


def separable_specs(seed: int = 0, fs: float = 100.0) -> tuple[SynthSpec, SynthSpec]:
    """Spec pair for the toy SA / non-SA task: lower R and higher S amplitude under SA."""
    base = SynthSpec(fs=fs, heart_rate=62.0, rr_jitter=0.03, noise_snr_db=20.0, seed=seed)
    return (
        replace(base, r_amp=0.6, s_amp=0.2),
        replace(base, r_amp=1.0, s_amp=0.4),
    )


def measured_snr_db(noisy: Sequence[float], clean: Sequence[float]) -> float:
    noisy, clean = np.asarray(noisy), np.asarray(clean)
    return 10 * np.log10(np.mean(clean**2) / np.mean((noisy - clean) ** 2))
