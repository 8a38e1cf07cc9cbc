"""Synthetic two-domain speaker corpus for desk-scale experiments.

Each speaker owns a fixed triple of resonances and a pitch range.  An
utterance is a train of syllables; every syllable excites the speaker's
resonators with a jittered glottal pulse train plus aspiration noise, with
its own random balance between the three resonances.  The target domain is
the same render passed through one fixed channel: spectral tilt, a short
exponential reverb tail and stationary coloured noise.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp.audio import AudioSignal, write_wav
from .dsp.augment import convolve_rir
from .formats import ManifestEntry, write_manifest, write_pairs


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_speakers: int = 20
    utts_per_speaker: int = 10
    utt_seconds: float = 3.0
    sample_rate: int = 8000
    sessions_per_speaker: int = 2
    tilt_coef: float = 0.85  # first-order high-pass  y[n] = x[n] - a x[n-1]
    reverb_t60: float = 0.25
    reverb_seconds: float = 0.12
    channel_snr_db: float = 12.0
    n_noise_clips: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least two speakers")
        if self.utts_per_speaker < 1 or self.utt_seconds <= 0:
            raise ValueError("utts_per_speaker and utt_seconds must be positive")


def utt_rng(seed: int, key: str) -> np.random.Generator:
    """Deterministic per-item generator derived from (global seed, item id)."""
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


@dataclass(frozen=True)
class Speaker:
    name: str
    formants: tuple
    bandwidths: tuple
    f0: float


def make_speakers(spec: ToyCorpusSpec) -> list:
    rng = np.random.default_rng([spec.seed, 1])
    bands = ((300.0, 900.0), (900.0, 2200.0), (2200.0, 3500.0))
    out = []
    for i in range(spec.n_speakers):
        formants = tuple(float(rng.uniform(lo, hi)) for lo, hi in bands)
        bw = tuple(float(rng.uniform(60.0, 140.0)) for _ in bands)
        out.append(Speaker(f"spk{i:03d}", formants, bw, float(rng.uniform(90.0, 240.0))))
    return out


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    a = [1.0, -2.0 * r * np.cos(2 * np.pi * freq / fs), r * r]
    return lfilter([1.0 - r], a, x)


def render_utterance(spk: Speaker, spec: ToyCorpusSpec, rng: np.random.Generator) -> np.ndarray:
    fs = spec.sample_rate
    n = int(round(spec.utt_seconds * fs))
    out = np.zeros(n)
    pos = int(rng.integers(0, int(0.1 * fs)))
    while pos < n:
        length = int(rng.uniform(0.12, 0.3) * fs)
        f0 = spk.f0 * rng.uniform(0.85, 1.15)
        period = fs / f0
        t = np.arange(length)
        phase = np.cumsum(np.full(length, 1.0 / period) * (1 + 0.02 * rng.standard_normal(length)))
        pulses = np.diff(np.floor(phase), prepend=0.0)
        exc = pulses + 0.05 * rng.standard_normal(length)
        weights = rng.dirichlet(np.full(3, 0.6))
        syl = sum(w * _resonator(exc, f, b, fs) for w, f, b in zip(weights, spk.formants, spk.bandwidths))
        env = np.sin(np.pi * t / length) ** 0.5
        syl = syl * env * rng.uniform(0.5, 1.0)
        end = min(pos + length, n)
        out[pos:end] += syl[: end - pos]
        pos = end + int(rng.uniform(0.04, 0.15) * fs)
    out += 1e-4 * rng.standard_normal(n)
    return 0.3 * out / np.max(np.abs(out))


def channel_rir(spec: ToyCorpusSpec) -> AudioSignal:
    rng = np.random.default_rng([spec.seed, 2])
    fs = spec.sample_rate
    n = int(spec.reverb_seconds * fs)
    t = np.arange(n) / fs
    tail = rng.standard_normal(n) * np.exp(-6.9 * t / spec.reverb_t60) * 0.5
    tail[0] = 1.0
    return AudioSignal(tail, fs)


def channel_noise(spec: ToyCorpusSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    # pinkish: white noise through a leaky integrator
    return lfilter([1.0], [1.0, -0.9], rng.standard_normal(n))


def apply_channel(x: np.ndarray, spec: ToyCorpusSpec, rng: np.random.Generator) -> np.ndarray:
    fs = spec.sample_rate
    y = lfilter([1.0, -spec.tilt_coef], [1.0], x)
    y = convolve_rir(AudioSignal(y, fs), channel_rir(spec)).samples
    noise = channel_noise(spec, y.size, rng)
    p_sig = np.mean(y * y)
    noise *= np.sqrt(p_sig / (np.mean(noise * noise) * 10 ** (spec.channel_snr_db / 10)))
    y = y + noise
    return 0.3 * y / np.max(np.abs(y))


def make_noise_clip(k: int, spec: ToyCorpusSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 3, k])
    fs = spec.sample_rate
    n = 2 * fs
    kind = k % 4
    w = rng.standard_normal(n)
    if kind == 0:
        x = w
    elif kind == 1:
        x = lfilter([1.0], [1.0, -0.95], w)
    elif kind == 2:
        f = rng.uniform(300, 3000)
        x = _resonator(w, f, 300.0, fs)
    else:
        t = np.arange(n) / fs
        x = 0.5 * w + np.sin(2 * np.pi * rng.uniform(200, 2000) * t) * (np.sin(2 * np.pi * 3 * t) > 0)
    return 0.5 * x / np.max(np.abs(x))


def synth_toy(spec: ToyCorpusSpec, outdir) -> dict:
    """Write wavs and manifests; returns the manifest paths.

    ``pairs.tsv`` links each target utterance to the source render it was
    made from.  It exists for evaluation only and is never read by training.
    """
    outdir = Path(outdir)
    fs = spec.sample_rate
    src_entries, tgt_entries, pairs, noise_entries = [], [], [], []
    per_session = max(1, -(-spec.utts_per_speaker // spec.sessions_per_speaker))
    for spk in make_speakers(spec):
        for u in range(spec.utts_per_speaker):
            uid = f"{spk.name}-u{u:02d}"
            session = f"{spk.name}-s{u // per_session}"
            clean = render_utterance(spk, spec, utt_rng(spec.seed, "render/" + uid))
            noisy = apply_channel(clean, spec, utt_rng(spec.seed, "channel/" + uid))
            src_path = outdir / "wav" / "source" / f"src-{uid}.wav"
            tgt_path = outdir / "wav" / "target" / f"tgt-{uid}.wav"
            write_wav(src_path, AudioSignal(clean, fs))
            write_wav(tgt_path, AudioSignal(noisy, fs))
            src_entries.append(ManifestEntry(f"src-{uid}", spk.name, session, "source", fs, str(src_path)))
            tgt_entries.append(ManifestEntry(f"tgt-{uid}", spk.name, session, "target", fs, str(tgt_path)))
            pairs.append((f"tgt-{uid}", f"src-{uid}"))
    for k in range(spec.n_noise_clips):
        path = outdir / "wav" / "noise" / f"noise{k:02d}.wav"
        write_wav(path, AudioSignal(make_noise_clip(k, spec), fs))
        noise_entries.append(ManifestEntry(f"noise{k:02d}", "none", "none", "noise", fs, str(path)))
    paths = {
        "source": outdir / "source.tsv",
        "target": outdir / "target.tsv",
        "noise": outdir / "noise.tsv",
        "pairs": outdir / "pairs.tsv",
    }
    write_manifest(paths["source"], src_entries)
    write_manifest(paths["target"], tgt_entries)
    write_manifest(paths["noise"], noise_entries)
    write_pairs(paths["pairs"], pairs)
    return paths
