"""Waveform synthesis for the desk-scale corpus.

Five acoustic templates, one per class, each with per-event randomized
parameters so that clips within a class vary substantially:

* ``tone``      steady sine, carrier 300-600 Hz
* ``am_tone``   same carrier band, fully amplitude-modulated at 4-6 Hz;
                within a fraction of a modulation period it is
                indistinguishable from ``tone``, so separating the two
                requires temporal context beyond a short analysis window
* ``chirp``     rising linear sweep starting at 700-1200 Hz
* ``noise_band`` band-limited noise burst between 2 and 4.5 kHz
* ``harmonic``  five-partial harmonic stack, fundamental 110-220 Hz

Events are mixed over a pink-noise background at a per-event SNR drawn from
the corpus SNR range. All randomness flows through the caller's generator,
so rendering is deterministic given the generator state.
"""

from __future__ import annotations

import numpy as np

CLASS_NAMES = ("tone", "am_tone", "chirp", "noise_band", "harmonic")

BACKGROUND_RMS = 0.05
FADE_SECONDS = 0.02


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS pink (1/f power) noise of length n."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    shaping = np.ones_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    shaped = np.fft.irfft(spectrum * shaping, n=n)
    return shaped / max(np.sqrt(np.mean(shaped**2)), 1e-12)


def _fade(signal: np.ndarray, sample_rate: int) -> np.ndarray:
    n_fade = min(int(FADE_SECONDS * sample_rate), len(signal) // 2)
    if n_fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_fade) / n_fade)
        signal[:n_fade] *= ramp
        signal[-n_fade:] *= ramp[::-1]
    return signal


def _unit_rms(signal: np.ndarray) -> np.ndarray:
    return signal / max(np.sqrt(np.mean(signal**2)), 1e-12)


def synth_event(class_id: int, duration: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Render one event of the given class at unit RMS."""
    n = max(1, int(round(duration * sample_rate)))
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0.0, 2.0 * np.pi)

    if class_id == 0:  # tone
        carrier = np.exp(rng.uniform(np.log(300.0), np.log(600.0)))
        sig = np.sin(2 * np.pi * carrier * t + phase)
    elif class_id == 1:  # am_tone
        carrier = np.exp(rng.uniform(np.log(300.0), np.log(600.0)))
        mod_rate = rng.uniform(4.0, 6.0)
        envelope = 0.5 * (1.0 - np.cos(2 * np.pi * mod_rate * t))
        sig = envelope * np.sin(2 * np.pi * carrier * t + phase)
    elif class_id == 2:  # chirp
        f0 = rng.uniform(700.0, 1200.0)
        f1 = f0 * rng.uniform(1.8, 3.0)
        inst_phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / duration * t**2)
        sig = np.sin(inst_phase + phase)
    elif class_id == 3:  # noise_band
        lo = rng.uniform(2000.0, 3000.0)
        hi = lo + rng.uniform(800.0, 1500.0)
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        sig = np.fft.irfft(spectrum, n=n)
    elif class_id == 4:  # harmonic
        f0 = rng.uniform(110.0, 220.0)
        sig = np.zeros(n)
        for k in range(1, 6):
            sig += np.sin(2 * np.pi * k * f0 * t + phase * k) / k
    else:
        raise ValueError(f"no template for class id {class_id}; supported: 0..{len(CLASS_NAMES) - 1}")

    # Normalize after fading so the stated SNR is exact for the whole event.
    return _unit_rms(_fade(sig, sample_rate))


def render_scene(
    events,
    clip_seconds: float,
    sample_rate: int,
    snr_range: tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Mix events over pink noise. events: iterable of (class_id, onset, offset)."""
    n = int(round(clip_seconds * sample_rate))
    mix = BACKGROUND_RMS * pink_noise(n, rng)
    for class_id, onset, offset in events:
        snr_db = rng.uniform(snr_range[0], snr_range[1])
        amplitude = BACKGROUND_RMS * 10.0 ** (snr_db / 20.0)
        sig = amplitude * synth_event(class_id, offset - onset, sample_rate, rng)
        start = int(round(onset * sample_rate))
        stop = min(start + len(sig), n)
        mix[start:stop] += sig[: stop - start]
    peak = np.max(np.abs(mix))
    if peak > 0.99:
        mix *= 0.99 / peak
    return mix
