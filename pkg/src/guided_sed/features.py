"""Log mel-band feature extraction.

Both network archetypes consume the same representation: 64 log mel-band
energies from 40 ms frames with 50% overlap, so a 10 s clip at 16 kHz
becomes exactly 500 frames. Framing is center-padded (reflection of half a
frame on each side); without it the same clip would yield 499 frames.

Conventions that the underlying recipe leaves open are pinned here and kept
behind :class:`FeatureConfig`: Hann analysis window, magnitude-squared
(energy) mel projection with a 1e-10 floor, mel range 0 Hz to Nyquist.
"""

from __future__ import annotations

import math
import struct
import wave as wave_module
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ValidationError

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end parameters. Defaults give (500, 64) features for 10 s @ 16 kHz."""

    frame_length_ms: float = 40.0
    hop_fraction: float = 0.5
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None  # None means Nyquist
    log_floor: float = 1e-10

    def validate(self) -> None:
        if self.frame_length_ms <= 0:
            raise ConfigError(f"frame_length_ms must be positive, got {self.frame_length_ms}")
        if not 0.0 < self.hop_fraction < 1.0:
            raise ConfigError(f"hop_fraction must lie in (0, 1), got {self.hop_fraction}")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")

    def frame_length(self, sample_rate: int) -> int:
        return int(round(self.frame_length_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.frame_length(sample_rate) * self.hop_fraction))

    def hop_seconds(self, sample_rate: int) -> float:
        return self.hop_length(sample_rate) / sample_rate

    def resolved_fmax(self, sample_rate: int) -> float:
        fmax = sample_rate / 2.0 if self.fmax is None else self.fmax
        if not self.fmin < fmax <= sample_rate / 2.0:
            raise ConfigError(
                f"require fmin < fmax <= Nyquist, got fmin={self.fmin}, fmax={fmax}, "
                f"sample_rate={sample_rate}"
            )
        return fmax


@dataclass(frozen=True)
class Waveform:
    """Single-channel audio, samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class LogMelSpectrogram:
    """values: (T, F) float32 log energies; frame_hop_seconds: hop in seconds."""

    values: np.ndarray
    frame_hop_seconds: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def frame_count(n_samples: int, config: FeatureConfig, sample_rate: int) -> int:
    """Number of frames produced for n_samples under center-padded framing."""
    if n_samples < 0:
        raise InputError(f"n_samples must be >= 0, got {n_samples}")
    config.validate()
    hop = config.hop_length(sample_rate)
    if hop <= 0:
        raise ConfigError(f"hop length is non-positive for sample_rate={sample_rate}")
    return -(-n_samples // hop)  # ceil division


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(config: FeatureConfig, n_fft_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft_bins).

    Rows are ordered by ascending center frequency; each row is a single
    triangle with unit peak. Raises ConfigError when the frequency
    resolution is too coarse to give every band a non-empty support.
    """
    config.validate()
    fmax = config.resolved_fmax(sample_rate)
    if n_fft_bins < 2:
        raise ConfigError(f"n_fft_bins must be >= 2, got {n_fft_bins}")

    # Band edges are equally spaced on the mel scale; band j spans
    # [edge_j, edge_{j+2}] with its peak at edge_{j+1}.
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.n_mels + 2))
    # n_fft_bins is the rfft bin count for an n_fft of 2*(n_fft_bins-1).
    bin_freqs = np.arange(n_fft_bins) * (sample_rate / 2.0) / (n_fft_bins - 1)

    fb = np.zeros((config.n_mels, n_fft_bins), dtype=np.float64)
    for j in range(config.n_mels):
        lo, center, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[j] = np.clip(np.minimum(rising, falling), 0.0, None)

    row_sums = fb.sum(axis=1)
    if np.any(row_sums <= 0):
        empty = int(np.argmin(row_sums))
        raise ConfigError(
            f"mel band {empty} has no FFT bin support; n_mels={config.n_mels} is too "
            f"large for {n_fft_bins} FFT bins at {sample_rate} Hz"
        )
    return fb


def _hann_window(n: int) -> np.ndarray:
    # Periodic Hann, the usual analysis-window convention.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _fft_size(frame_length: int) -> int:
    return 1 << max(0, (frame_length - 1).bit_length())


def compute_log_mel(w: Waveform, config: FeatureConfig) -> LogMelSpectrogram:
    """Convert a waveform to its (T, n_mels) log mel energy matrix."""
    config.validate()
    samples = w.samples
    if samples.size == 0:
        raise InputError("waveform is empty")
    if not np.all(np.isfinite(samples)):
        raise InputError("waveform contains NaN or Inf samples")

    flen = config.frame_length(w.sample_rate)
    hop = config.hop_length(w.sample_rate)
    n_frames = frame_count(samples.size, config, w.sample_rate)

    pad = flen // 2
    padded = np.pad(samples, pad, mode="reflect") if samples.size > 1 else np.pad(
        samples, pad, mode="edge"
    )
    window = _hann_window(flen)
    frames = np.lib.stride_tricks.sliding_window_view(padded, flen)[:: hop][:n_frames]
    n_fft = _fft_size(flen)
    spectrum = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2

    fb = build_mel_filterbank(config, power.shape[1], w.sample_rate)
    mel_energy = power @ fb.T
    values = np.log(np.maximum(mel_energy, config.log_floor))
    return LogMelSpectrogram(
        values=values.astype(np.float32), frame_hop_seconds=config.hop_seconds(w.sample_rate)
    )


# ---------------------------------------------------------------------------
# Waveform file I/O (RIFF/WAVE, PCM-16, mono)
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    with wave_module.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise InputError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        raw = fh.readframes(fh.getnframes())
        rate = fh.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path, w: Waveform) -> None:
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave_module.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Feature cache container
#
# Layout (all little-endian): uint32 T, uint32 F, float64 hop_seconds,
# then T*F float32 values in row-major order.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IId")


def save_features(path, spec: LogMelSpectrogram) -> None:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    t, f = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(t, f, spec.frame_hop_seconds))
        fh.write(values.tobytes())


def load_features(path) -> LogMelSpectrogram:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValidationError(f"{path}: truncated feature header")
        t, f, hop = _HEADER.unpack(header)
        data = fh.read(t * f * 4)
    if len(data) != t * f * 4:
        raise ValidationError(f"{path}: truncated feature payload")
    values = np.frombuffer(data, dtype="<f4").reshape(t, f)
    return LogMelSpectrogram(values=values, frame_hop_seconds=hop)


def default_feature_config() -> FeatureConfig:
    return FeatureConfig()


def with_disabled_floor(config: FeatureConfig) -> FeatureConfig:
    """Copy of config with an effectively disabled energy floor (for tests)."""
    return replace(config, log_floor=np.finfo(np.float64).tiny)
