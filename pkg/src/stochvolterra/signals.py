"""Excitation signals, measurement noise and spectral diagnostics.

Everything here works on :class:`TimeSeries`, a uniformly sampled real
signal. Functions are pure; randomness is driven by an explicit seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import ValidationError

__all__ = [
    "TimeSeries",
    "ChirpSpec",
    "generate_chirp",
    "generate_sine",
    "add_noise_snr",
    "power_spectral_density",
    "frequency_response",
    "write_csv",
    "read_csv",
]


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Uniformly sampled real-valued signal.

    Parameters
    ----------
    samples : array_like
        Signal values. Copied and stored read-only.
    sample_rate_hz : float
        Sampling frequency in Hz.
    start_time_s : float
        Time stamp of the first sample.
    """

    samples: np.ndarray
    sample_rate_hz: float
    start_time_s: float = 0.0

    def __post_init__(self):
        x = np.array(self.samples, dtype=float).ravel()
        if x.size == 0:
            raise ValidationError("time series must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValidationError("time series contains non-finite samples")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "start_time_s", float(self.start_time_s))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate_hz

    @property
    def time(self) -> np.ndarray:
        return self.start_time_s + np.arange(len(self)) / self.sample_rate_hz

    @property
    def mean_square(self) -> float:
        return float(np.mean(self.samples**2))

    def with_samples(self, samples) -> "TimeSeries":
        """Return a series with the same timing and new values."""
        return TimeSeries(samples, self.sample_rate_hz, self.start_time_s)

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.start_time_s == other.start_time_s
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True)
class ChirpSpec:
    """Linear frequency sweep from ``f0_hz`` to ``f1_hz`` over ``duration_s``."""

    amplitude_n: float
    f0_hz: float
    f1_hz: float
    duration_s: float

    def __post_init__(self):
        if not self.f0_hz > 0:
            raise ValidationError(f"chirp start frequency must be positive, got {self.f0_hz}")
        if not self.f1_hz > self.f0_hz:
            raise ValidationError("chirp end frequency must exceed start frequency")
        if not self.duration_s > 0:
            raise ValidationError("chirp duration must be positive")
        if not math.isfinite(self.amplitude_n):
            raise ValidationError("chirp amplitude must be finite")


def _n_samples(duration_s: float, sample_rate_hz: float) -> int:
    if not sample_rate_hz > 0:
        raise ValidationError("sample rate must be positive")
    n = int(round(duration_s * sample_rate_hz))
    if n < 2:
        raise ValidationError("signal must span at least two samples")
    return n


def generate_chirp(spec: ChirpSpec, sample_rate_hz: float) -> TimeSeries:
    """Sample ``A sin(2 pi (f0 t + (f1 - f0) t^2 / (2 T)))``."""
    n = _n_samples(spec.duration_s, sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    sweep = (spec.f1_hz - spec.f0_hz) / (2.0 * spec.duration_s)
    phase = 2.0 * np.pi * (spec.f0_hz * t + sweep * t**2)
    return TimeSeries(spec.amplitude_n * np.sin(phase), sample_rate_hz)


def generate_sine(amplitude_n: float, freq_hz: float, duration_s: float, sample_rate_hz: float) -> TimeSeries:
    """Single tone ``A sin(2 pi f t)``."""
    if not 0 <= freq_hz < sample_rate_hz / 2:
        raise ValidationError(f"sine frequency {freq_hz} Hz violates Nyquist limit {sample_rate_hz / 2} Hz")
    n = _n_samples(duration_s, sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    return TimeSeries(amplitude_n * np.sin(2.0 * np.pi * freq_hz * t), sample_rate_hz)


def add_noise_snr(signal: TimeSeries, snr_db: float, rng_seed) -> TimeSeries:
    """Add white Gaussian noise at a prescribed signal-to-noise ratio.

    The noise variance is the mean square of the clean record divided by
    ``10**(snr_db / 10)``.

    Parameters
    ----------
    signal : TimeSeries
        Clean signal, must have nonzero power.
    snr_db : float
        Requested SNR in decibels.
    rng_seed : int or numpy.random.SeedSequence
        Seed for the noise generator.
    """
    power = signal.mean_square
    if power <= 0:
        raise ValidationError("SNR is undefined for a zero-power signal")
    variance = power / 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, math.sqrt(variance), len(signal))
    return signal.with_samples(signal.samples + noise)


def power_spectral_density(signal: TimeSeries, segment_len: int, overlap_fraction: float = 0.5):
    """One-sided Welch PSD with a Hann window.

    Returns
    -------
    freqs, psd : ndarray
        Frequencies in Hz and density in units**2/Hz. ``psd.sum() * df``
        approximates the mean square of the signal.
    """
    n = len(signal)
    if not 1 <= segment_len <= n:
        raise ValidationError(f"segment length {segment_len} must be in [1, {n}]")
    if not 0 <= overlap_fraction < 1:
        raise ValidationError("overlap fraction must be in [0, 1)")
    noverlap = int(overlap_fraction * segment_len)
    freqs, psd = sps.welch(
        signal.samples,
        fs=signal.sample_rate_hz,
        window="hann",
        nperseg=segment_len,
        noverlap=noverlap,
        detrend=False,
        return_onesided=True,
        scaling="density",
    )
    return freqs, psd


def frequency_response(
    input: TimeSeries,
    output: TimeSeries,
    window_tau_s: float | None = None,
    zero_pad: int = 16,
    input_floor: float = 0.0,
):
    """Single-record FRF estimate ``H(f) = S_uy(f) / S_uu(f)``.

    With one record the cross/auto spectra reduce to ``Y / U``. An optional
    exponential window ``exp(-t / tau)`` applied to both channels suppresses
    the leakage from truncating a still-ringing response; for a linear system
    it shifts every pole real part by ``-1/tau`` and nothing else.

    Bins where ``|U|`` falls below ``input_floor * max|U|`` carry no usable
    excitation and are returned as ``nan``.

    Returns
    -------
    freqs : ndarray
    frf : complex ndarray
    """
    if len(input) != len(output) or input.sample_rate_hz != output.sample_rate_hz:
        raise ValidationError("input and output must share length and sample rate")
    n = len(input)
    u = input.samples
    y = output.samples
    if window_tau_s is not None:
        w = np.exp(-np.arange(n) / input.sample_rate_hz / window_tau_s)
        u = u * w
        y = y * w
    nfft = n * max(int(zero_pad), 1)
    U = np.fft.rfft(u, nfft)
    Y = np.fft.rfft(y, nfft)
    freqs = np.fft.rfftfreq(nfft, 1.0 / input.sample_rate_hz)
    # S_uy / S_uu = conj(U) Y / |U|^2
    mag = np.abs(U)
    excited = (mag > 0) & (mag >= input_floor * mag.max())
    with np.errstate(divide="ignore", invalid="ignore"):
        frf = np.where(excited, np.conj(U) * Y / mag**2, np.nan)
    return freqs, frf


def write_csv(series: TimeSeries, path) -> None:
    """Write ``time_s,value`` rows with round-trip float precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time_s", "value"])
        for t, v in zip(series.time, series.samples):
            writer.writerow([repr(float(t)), repr(float(v))])


def read_csv(path) -> TimeSeries:
    """Read a series written by :func:`write_csv`."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["time_s", "value"]:
            raise ValidationError(f"{path}: expected header 'time_s,value', got {header}")
        rows = [(float(a), float(b)) for a, b in reader]
    if len(rows) < 2:
        raise ValidationError(f"{path}: need at least two samples to infer the sample rate")
    t = np.array([r[0] for r in rows])
    v = np.array([r[1] for r in rows])
    rate = (len(t) - 1) / (t[-1] - t[0])
    snapped = round(rate, 6)
    if abs(rate - snapped) <= 1e-9 * snapped:
        rate = snapped
    return TimeSeries(v, rate, t[0])
