"""PCM-16 mono WAV I/O and polyphase resampling."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

SUPPORTED_RATES = (8000, 16000)


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioFormatError("audio must be a non-empty 1-D array")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


def read_wav(path) -> AudioSignal:
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise AudioFormatError(f"{path}: {wf.getnchannels()} channels, only mono is supported")
            if wf.getsampwidth() != 2:
                raise AudioFormatError(f"{path}: {8 * wf.getsampwidth()}-bit samples, only 16-bit PCM is supported")
            if wf.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed audio is not supported")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: {exc}") from None
    except EOFError:
        raise AudioFormatError(f"{path}: truncated header") from None
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, sig: AudioSignal) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sig.sample_rate))
        wf.writeframes(to_pcm16(sig.samples).tobytes())


def resample(sig: AudioSignal, target_hz: int) -> AudioSignal:
    """Windowed-sinc polyphase resampling between 8 kHz and 16 kHz."""
    src = int(sig.sample_rate)
    if src not in SUPPORTED_RATES or target_hz not in SUPPORTED_RATES:
        raise AudioFormatError(f"unsupported rate pair {src} -> {target_hz}")
    if src == target_hz:
        return AudioSignal(sig.samples.copy(), src)
    g = gcd(src, target_hz)
    # Kaiser beta 8 keeps the stopband below -60 dB
    y = resample_poly(sig.samples, target_hz // g, src // g, window=("kaiser", 8.0))
    return AudioSignal(y, target_hz)
