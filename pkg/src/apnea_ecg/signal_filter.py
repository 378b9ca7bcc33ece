"""Linear-phase FIR band-pass design and zero-phase application."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BAND = (8.0, 12.0)
DEFAULT_ORDER = 100


@dataclass(frozen=True)
class FirSpec:
    f_low: float = DEFAULT_BAND[0]
    f_high: float = DEFAULT_BAND[1]
    order: int = DEFAULT_ORDER
    fs: float = 100.0

    def __post_init__(self):
        if not 0 < self.f_low < self.f_high < self.fs / 2:
            raise ValueError(
                f"band edges must satisfy 0 < {self.f_low} < {self.f_high} < fs/2 = {self.fs / 2}"
            )
        if self.order <= 0 or self.order % 2:
            raise ValueError(f"order must be a positive even integer, got {self.order}")


def _lowpass(cutoff: float, fs: float, n: np.ndarray, window: np.ndarray) -> np.ndarray:
    wc = 2.0 * cutoff / fs
    h = wc * np.sinc(wc * n) * window
    return h / h.sum()


def frequency_response(taps: np.ndarray, freqs, fs: float) -> np.ndarray:
    """Complex response of ``taps`` at the given frequencies (Hz)."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    k = np.arange(len(taps))
    return np.exp(-2j * np.pi * np.outer(freqs / fs, k)) @ taps


def design_bandpass(spec: FirSpec) -> np.ndarray:
    """Hamming-windowed sinc band-pass with ``spec.order + 1`` symmetric taps.

    Built as the difference of two unit-DC lowpass filters, so the taps sum to
    zero, then scaled to unit gain at the band centre.
    """
    n_taps = spec.order + 1
    n = np.arange(n_taps) - spec.order / 2
    window = np.hamming(n_taps)
    h = _lowpass(spec.f_high, spec.fs, n, window) - _lowpass(spec.f_low, spec.fs, n, window)
    centre = 0.5 * (spec.f_low + spec.f_high)
    h /= np.abs(frequency_response(h, centre, spec.fs))[0]
    # enforce exact symmetry against rounding in the sinc evaluation
    return 0.5 * (h + h[::-1])


def filter_zero_phase(signal, taps) -> np.ndarray:
    """Forward-backward FIR filtering with reflection padding of one filter length."""
    x = np.asarray(signal, dtype=np.float64)
    h = np.asarray(taps, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if x.size <= h.size:
        raise ValueError(f"signal length {x.size} must exceed filter length {h.size}")
    pad = h.size
    xp = np.pad(x, pad, mode="reflect")
    y = np.convolve(xp, h)[: xp.size]
    y = np.convolve(y[::-1], h)[: xp.size][::-1]
    return y[pad:-pad].copy()


def bandpass(signal, fs: float, band=DEFAULT_BAND, order: int = DEFAULT_ORDER) -> np.ndarray:
    return filter_zero_phase(signal, design_bandpass(FirSpec(band[0], band[1], order, fs)))
