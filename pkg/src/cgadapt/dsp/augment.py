"""Foreground-noise mixing at a target SNR and room-impulse-response convolution."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .audio import AudioSignal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentSpec:
    snr_lo: float = 0.0
    snr_hi: float = 15.0
    interval_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.snr_lo > self.snr_hi:
            raise ValueError("snr_lo must not exceed snr_hi")
        if self.interval_s <= 0:
            raise ValueError("interval_s must be positive")


@dataclass(frozen=True)
class NoiseEvent:
    start: int
    end: int
    noise_index: int
    snr_db: float
    gain: float


def snr_gain(p_signal: float, p_noise: float, snr_db: float) -> float:
    """Amplitude gain g with 10 log10(p_signal / (g^2 p_noise)) == snr_db."""
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_noise_at_snr(x: AudioSignal, noises, spec: AugmentSpec, rng: np.random.Generator,
                     events: list | None = None) -> AudioSignal:
    """Add one noise event per ``interval_s`` slot, each at its own random SNR.

    The SNR of an event is measured against the power of the signal samples
    it overlaps.  Noise clips are looped or truncated to fill the slot.
    Silent slots are skipped.  Appends a :class:`NoiseEvent` per mixed slot
    to ``events`` when given.
    """
    noises = list(noises)
    if not noises:
        raise ValueError("noise corpus is empty")
    for nz in noises:
        if nz.sample_rate != x.sample_rate:
            raise ValueError(f"noise rate {nz.sample_rate} != signal rate {x.sample_rate}")
    slot = max(1, int(round(spec.interval_s * x.sample_rate)))
    y = x.samples.copy()
    for start in range(0, y.size, slot):
        end = min(start + slot, y.size)
        seg = x.samples[start:end]
        p_sig = float(np.mean(seg * seg))
        k = int(rng.integers(0, len(noises)))
        snr = float(rng.uniform(spec.snr_lo, spec.snr_hi))
        if p_sig == 0.0:
            continue
        clip = np.resize(noises[k].samples, end - start)
        p_noise = float(np.mean(clip * clip))
        if p_noise == 0.0:
            continue
        g = snr_gain(p_sig, p_noise, snr)
        y[start:end] += g * clip
        if events is not None:
            events.append(NoiseEvent(start, end, k, snr, g))
    n_clip = int(np.count_nonzero(np.abs(y) > 1.0))
    if n_clip:
        log.warning("clipped %d samples after noise mixing", n_clip)
        np.clip(y, -1.0, 1.0, out=y)
    return AudioSignal(y, x.sample_rate)


def convolve_rir(x: AudioSignal, rir: AudioSignal) -> AudioSignal:
    """Reverberate ``x``; output is aligned on the RIR's strongest tap and
    rescaled to the input's peak level."""
    if rir.sample_rate != x.sample_rate:
        raise ValueError(f"RIR rate {rir.sample_rate} != signal rate {x.sample_rate}")
    h = rir.samples
    peak = int(np.argmax(np.abs(h)))
    if h[peak] == 0.0:
        raise ValueError("RIR is all zeros")
    h = h / h[peak]
    y = np.convolve(x.samples, h)[peak : peak + x.samples.size]
    p_out = np.max(np.abs(y))
    if p_out > 0:
        y = y * (np.max(np.abs(x.samples)) / p_out)
    return AudioSignal(y, x.sample_rate)
