"""Corpus-level preparation: SNR-based filtering and per-session concatenation."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import replace

import numpy as np

from ..formats import ManifestEntry
from .audio import AudioSignal, read_wav
from .wada import wada_snr


def filter_top_half_by_snr(manifest, snr_of=None) -> list:
    """Keep the ceil(n/2) entries with the highest estimated SNR.

    Output is sorted by SNR (descending), ties by utterance id, so it does
    not depend on the input order.  ``snr_of(entry)`` defaults to WADA-SNR
    of the entry's audio file.
    """
    entries = list(manifest)
    if not entries:
        raise ValueError("empty manifest")
    if snr_of is None:
        snr_of = lambda e: wada_snr(read_wav(e.path))  # noqa: E731
    scored = sorted(((snr_of(e), e) for e in entries), key=lambda t: (-t[0], t[1].utt_id))
    return [e for _, e in scored[: math.ceil(len(entries) / 2)]]


def concat_by_session(manifest, load=read_wav) -> list:
    """One ``(entry, AudioSignal)`` per (speaker, session).

    Files of a session are joined in utterance-id order; the new utterance
    id is ``<speaker>-<session>`` and ``path`` is left empty for the caller.
    """
    groups = defaultdict(list)
    for e in manifest:
        groups[(e.speaker_id, e.session_id)].append(e)
    out = []
    for (spk, sess), members in sorted(groups.items()):
        members.sort(key=lambda e: e.utt_id)
        sigs = [load(e.path) for e in members]
        rates = {s.sample_rate for s in sigs}
        if len(rates) != 1:
            raise ValueError(f"session {spk}/{sess} mixes sample rates {sorted(rates)}")
        rate = rates.pop()
        audio = AudioSignal(np.concatenate([s.samples for s in sigs]), rate)
        entry = replace(members[0], utt_id=f"{spk}-{sess}", sample_rate=rate, path="")
        out.append((entry, audio))
    return out


__all__ = ["filter_top_half_by_snr", "concat_by_session", "ManifestEntry"]
