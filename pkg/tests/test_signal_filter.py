import numpy as np
import pytest
from scipy.signal import firwin

from apnea_ecg.signal_filter import FirSpec, bandpass, design_bandpass, filter_zero_phase, frequency_response

FS = 100.0


@pytest.fixture(scope="module")
def taps():
    return design_bandpass(FirSpec())


def test_tap_count_and_symmetry(taps):
    assert taps.size == 101
    assert np.array_equal(taps, taps[::-1])


def test_zero_dc(taps):
    assert abs(taps.sum()) < 1e-10


@pytest.mark.parametrize("f,lo,hi", [(10.0, 0.9, 1.1), (9.8, 0.9, 1.1), (0.5, 0.0, 0.01), (49.0, 0.0, 0.01)])
def test_magnitude_probes(taps, f, lo, hi):
    mag = abs(frequency_response(taps, [f], FS)[0])
    assert lo <= mag <= hi


def test_matches_firwin(taps):
    ref = firwin(101, [8.0, 12.0], pass_zero=False, window="hamming", fs=FS)
    assert np.max(np.abs(taps - ref)) < 1e-3


def test_sinusoid_passes_without_shift(taps):
    t = np.arange(3000) / FS
    x = np.sin(2 * np.pi * 10 * t + 0.3)
    y = filter_zero_phase(x, taps)
    mid = slice(500, 2500)
    gain = abs(frequency_response(taps, [10.0], FS)[0]) ** 2
    assert np.max(np.abs(y[mid] - gain * x[mid])) < 1e-6
    lag = np.argmax(np.correlate(y[mid], x[mid], "full")) - (2000 - 1)
    assert abs(lag) < 1


def test_removes_baseline_wander(taps):
    t = np.arange(6000) / FS
    wander = np.sin(2 * np.pi * 0.3 * t)
    y = filter_zero_phase(wander, taps)
    assert np.sqrt(np.mean(y[1000:-1000] ** 2)) / np.sqrt(np.mean(wander**2)) < 0.01


def test_linearity_and_shift(taps, rng):
    a, b = rng.normal(size=(2, 2000))
    lhs = filter_zero_phase(2.0 * a - 3.0 * b, taps)
    rhs = 2.0 * filter_zero_phase(a, taps) - 3.0 * filter_zero_phase(b, taps)
    assert np.max(np.abs(lhs - rhs)) < 1e-9
    x = np.zeros(2000)
    x[800] = 1.0
    y0 = filter_zero_phase(x, taps)
    y1 = filter_zero_phase(np.roll(x, 37), taps)
    assert np.allclose(np.roll(y0, 37)[300:1700], y1[300:1700], atol=1e-12)


def test_zero_signal(taps):
    assert not filter_zero_phase(np.zeros(500), taps).any()


def test_output_length(taps):
    assert filter_zero_phase(np.ones(123 + 101), taps).size == 224


def test_short_signal_rejected(taps):
    with pytest.raises(ValueError):
        filter_zero_phase(np.zeros(50), taps)


@pytest.mark.parametrize("kw", [dict(f_low=12, f_high=8), dict(f_high=60), dict(order=99), dict(order=0), dict(fs=-1)])
def test_bad_spec(kw):
    with pytest.raises(ValueError):
        FirSpec(**kw)


def test_bandpass_helper_matches_two_step(rng):
    x = rng.normal(size=1000)
    assert np.array_equal(bandpass(x, FS), filter_zero_phase(x, design_bandpass(FirSpec())))
