"""Blind SNR estimation from the waveform amplitude distribution (WADA).

The statistic log(E|x|) - E[log|x|] of the peak-normalised waveform is
mapped to an SNR through a lookup table computed for gamma-distributed
speech (shape 0.4) in Gaussian noise; see ``data/wada_table.txt`` and
``scripts/make_wada_table.py``.
"""
from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

from .audio import AudioSignal

EPS = 1e-10


@lru_cache(maxsize=1)
def lookup_table() -> tuple:
    """(statistic, snr_db) arrays with the statistic strictly increasing."""
    text = resources.files("cgadapt.dsp").joinpath("data/wada_table.txt").read_text()
    rows = np.array([[float(v) for v in line.split()] for line in text.splitlines()
                     if line.strip() and not line.startswith("#")])
    snr, stat = rows[:, 0], rows[:, 1]
    keep = np.concatenate([[True], np.diff(stat) > 0])
    return stat[keep], snr[keep]


def wada_statistic(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    x = x / np.max(np.abs(x))
    a = np.maximum(np.abs(x), EPS)
    return float(np.log(max(EPS, a.mean())) - np.log(a).mean())


def wada_snr(sig: AudioSignal) -> float:
    """Estimated SNR in dB, clamped to the table range [-20, 100]."""
    if sig.samples.size < 0.5 * sig.sample_rate:
        raise ValueError("WADA-SNR needs at least 0.5 s of audio")
    if not np.any(sig.samples):
        raise ValueError("WADA-SNR is undefined for an all-zero signal")
    stat, snr = lookup_table()
    return float(np.interp(wada_statistic(sig.samples), stat, snr))
