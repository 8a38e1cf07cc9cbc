"""Log-mel filter-bank features, energy VAD and sliding mean normalisation.

Framing follows the usual speech-toolkit conventions: 25 ms frames every
10 ms with no partial frames at the edges, per-frame DC removal,
pre-emphasis 0.97, Hamming window, power spectrum on the next power-of-two
FFT size, triangular filters equally spaced on the mel scale
(``1127 ln(1 + f/700)``) between 20 Hz and Nyquist, natural log with a
1e-10 floor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioSignal

LOG_FLOOR = 1e-10


@dataclass
class FeatureMatrix:
    feats: np.ndarray  # [frames, mel_bins]
    vad: np.ndarray  # bool [frames]
    utt_id: str = ""
    log_energy: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.feats.shape[0]

    def voiced(self) -> np.ndarray:
        return self.feats[self.vad]


class SignalTooShortError(ValueError):
    pass


def mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_inv(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, low_hz: float = 20.0, high_hz: float | None = None) -> np.ndarray:
    """[n_mels, n_fft//2 + 1] triangular weights, triangles drawn in the mel domain."""
    high_hz = sample_rate / 2 if high_hz is None else high_hz
    edges = np.linspace(mel(low_hz), mel(high_hz), n_mels + 2)
    bin_mel = mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(n_mels: int, sample_rate: int, low_hz: float = 20.0, high_hz: float | None = None) -> np.ndarray:
    high_hz = sample_rate / 2 if high_hz is None else high_hz
    return mel_inv(np.linspace(mel(low_hz), mel(high_hz), n_mels + 2)[1:-1])


def frame_count(n_samples: int, frame_len: int, shift: int) -> int:
    return 0 if n_samples < frame_len else 1 + (n_samples - frame_len) // shift


def logmel_fbank(sig: AudioSignal, n_mels: int = 40, frame_ms: float = 25.0, shift_ms: float = 10.0,
                 low_hz: float = 20.0, preemph: float = 0.97, utt_id: str = "") -> FeatureMatrix:
    sr = sig.sample_rate
    flen = int(round(sr * frame_ms / 1000))
    shift = int(round(sr * shift_ms / 1000))
    n = frame_count(sig.samples.size, flen, shift)
    if n < 1:
        raise SignalTooShortError(f"{sig.samples.size} samples is shorter than one {flen}-sample frame")
    frames = sliding_window_view(sig.samples, flen)[::shift][:n].copy()
    frames -= frames.mean(axis=1, keepdims=True)
    energy = np.log(np.maximum((frames * frames).sum(axis=1), LOG_FLOOR))
    frames[:, 1:] -= preemph * frames[:, :-1].copy()
    frames[:, 0] -= preemph * frames[:, 0]
    frames *= np.hamming(flen)
    n_fft = 1 << (flen - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    bank = mel_filterbank(n_mels, n_fft, sr, low_hz)
    feats = np.log(np.maximum(power @ bank.T, LOG_FLOOR))
    return FeatureMatrix(feats, np.ones(n, dtype=bool), utt_id, energy)


def energy_vad(log_energy, offset: float = 0.0, context: int = 2) -> np.ndarray:
    """Frames louder than the utterance mean (+ offset), majority-smoothed over ±context frames."""
    if isinstance(log_energy, FeatureMatrix):
        log_energy = log_energy.log_energy
    e = np.asarray(log_energy, dtype=np.float64)
    if e.size < 1:
        raise ValueError("energy_vad needs at least one frame")
    raw = (e > e.mean() + offset).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(raw)])
    idx = np.arange(e.size)
    lo = np.maximum(idx - context, 0)
    hi = np.minimum(idx + context + 1, e.size)
    return 2 * (csum[hi] - csum[lo]) > (hi - lo)


def sliding_cmn(feats, window: int = 300) -> np.ndarray:
    """Subtract a centred running mean over ``window`` frames.

    Near the edges the window is shifted (not shrunk) to stay inside the
    utterance; utterances shorter than ``window`` get their global mean removed.
    """
    if isinstance(feats, FeatureMatrix):
        feats = feats.feats
    x = np.asarray(feats, dtype=np.float64)
    n = x.shape[0]
    if n < 1:
        raise ValueError("sliding_cmn needs at least one frame")
    if n <= window:
        return x - x.mean(axis=0, keepdims=True)
    csum = np.concatenate([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    start = np.clip(np.arange(n) - window // 2, 0, n - window)
    means = (csum[start + window] - csum[start]) / window
    return x - means


def extract(sig: AudioSignal, utt_id: str = "", n_mels: int = 40, cmn_window: int = 300,
            vad_offset: float = 0.0) -> FeatureMatrix:
    """Full front end: log-mel, energy VAD mask, sliding CMN over all frames."""
    fm = logmel_fbank(sig, n_mels=n_mels, utt_id=utt_id)
    fm.vad = energy_vad(fm.log_energy, offset=vad_offset)
    fm.feats = sliding_cmn(fm.feats, cmn_window)
    return fm
