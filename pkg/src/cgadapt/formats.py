"""On-disk formats shared by the pipeline stages.

* ``FMAP``: named-tensor container (checkpoints, backend models).
* ``FBNK``: one feature matrix plus its VAD mask.
* ``EMBD``: a set of embeddings keyed by utterance id.
* text manifests, feature lists, trial lists and score files.

All binary integers and reals are little-endian.
"""
from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
FBNK_MAGIC = b"FBNK"
FBNK_VERSION = 1
EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1

DTYPE_F64 = 0
DTYPE_U64 = 1
_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_U64: np.dtype("<u8")}


class FormatError(ValueError):
    """Malformed, truncated or unsupported file."""


class VersionError(FormatError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


# ---------------------------------------------------------------------------
# FMAP named-tensor container


def encode_tensors(tensors: dict) -> bytes:
    out = io.BytesIO()
    out.write(FMAP_MAGIC)
    out.write(struct.pack("<II", FMAP_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "uib":
            code, arr = DTYPE_U64, arr.astype("<u8", order="C")
        else:
            code, arr = DTYPE_F64, arr.astype("<f8", order="C")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    body = out.getvalue()
    return body + struct.pack("<Q", zlib.crc32(body))


def decode_tensors(buf: bytes) -> dict:
    if len(buf) < 4 or buf[:4] != FMAP_MAGIC:
        raise FormatError("FMAP: bad magic")
    if len(buf) < 20:
        raise FormatError("FMAP: truncated file")
    rd = _Reader(buf[:-8], "FMAP")
    rd.take(4)
    version, count = rd.unpack("<II")
    if version != FMAP_VERSION:
        raise VersionError(f"FMAP: unsupported version {version} (expected {FMAP_VERSION})")
    (crc,) = struct.unpack("<Q", buf[-8:])
    if zlib.crc32(buf[:-8]) != crc:
        raise FormatError("FMAP: checksum mismatch (corrupted or truncated file)")
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        try:
            name = rd.take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"FMAP: tensor name is not UTF-8: {e}") from None
        code, rank = rd.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"FMAP: unknown dtype code {code} for {name!r}")
        dims = rd.unpack(f"<{rank}I") if rank else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(rd.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    if rd.pos != len(rd.buf):
        raise FormatError("FMAP: trailing bytes before checksum")
    return tensors


def save_tensors(path, tensors: dict) -> None:
    _atomic_write(path, encode_tensors(tensors))


def load_tensors(path) -> dict:
    return decode_tensors(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# FBNK feature files


def save_features(path, feats: np.ndarray, vad: np.ndarray) -> None:
    feats = np.asarray(feats)
    vad = np.asarray(vad, dtype=bool)
    if feats.ndim != 2 or vad.shape != (feats.shape[0],):
        raise FormatError(f"FBNK: inconsistent shapes {feats.shape} / {vad.shape}")
    rows, cols = feats.shape
    payload = (
        FBNK_MAGIC
        + struct.pack("<III", FBNK_VERSION, rows, cols)
        + np.ascontiguousarray(feats, dtype="<f4").tobytes()
        + vad.astype(np.uint8).tobytes()
    )
    _atomic_write(path, payload)


def load_features(path) -> tuple:
    """Return ``(feats float64 [rows, cols], vad bool [rows])``."""
    buf = Path(path).read_bytes()
    if buf[:4] != FBNK_MAGIC:
        raise FormatError(f"FBNK: bad magic in {path}")
    rd = _Reader(buf, "FBNK")
    rd.take(4)
    version, rows, cols = rd.unpack("<III")
    if version != FBNK_VERSION:
        raise VersionError(f"FBNK: unsupported version {version}")
    feats = np.frombuffer(rd.take(rows * cols * 4), dtype="<f4").reshape(rows, cols)
    vad = np.frombuffer(rd.take(rows), dtype=np.uint8).astype(bool)
    if rd.pos != len(buf):
        raise FormatError("FBNK: trailing bytes")
    return feats.astype(np.float64), vad


# ---------------------------------------------------------------------------
# EMBD embedding sets


def save_embeddings(path, ids, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    ids = list(ids)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise FormatError("EMBD: ids and vectors disagree")
    out = io.BytesIO()
    out.write(EMBD_MAGIC)
    out.write(struct.pack("<III", EMBD_VERSION, len(ids), vectors.shape[1]))
    for uid, vec in zip(ids, vectors):
        raw = uid.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    _atomic_write(path, out.getvalue())


def load_embeddings(path) -> tuple:
    """Return ``(ids, float64 [count, dim])``."""
    buf = Path(path).read_bytes()
    if buf[:4] != EMBD_MAGIC:
        raise FormatError(f"EMBD: bad magic in {path}")
    rd = _Reader(buf, "EMBD")
    rd.take(4)
    version, count, dim = rd.unpack("<III")
    if version != EMBD_VERSION:
        raise VersionError(f"EMBD: unsupported version {version}")
    ids, vecs = [], np.empty((count, dim))
    for i in range(count):
        (n,) = rd.unpack("<H")
        ids.append(rd.take(n).decode("utf-8"))
        vecs[i] = np.frombuffer(rd.take(4 * dim), dtype="<f4")
    return ids, vecs


# ---------------------------------------------------------------------------
# text formats


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    speaker_id: str
    session_id: str
    domain: str
    sample_rate: int
    path: str


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def read_manifest(path) -> list:
    entries = []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 tab-separated columns, got {len(cols)}")
        try:
            rate = int(cols[4])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad sample rate {cols[4]!r}") from None
        entries.append(ManifestEntry(cols[0], cols[1], cols[2], cols[3], rate, cols[5]))
    return entries


def write_manifest(path, entries) -> None:
    lines = ["# utt_id\tspeaker_id\tsession_id\tdomain\tsample_rate\tpath"]
    for e in entries:
        lines.append("\t".join([e.utt_id, e.speaker_id, e.session_id, e.domain, str(e.sample_rate), e.path]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_pairs(path) -> list:
    """Two-column ``key<TAB>value`` list (feature lists, pair lists)."""
    out = []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 tab-separated columns")
        out.append((cols[0], cols[1]))
    return out


def write_pairs(path, pairs) -> None:
    text = "".join(f"{a}\t{b}\n" for a, b in pairs)
    _atomic_write(path, text.encode("utf-8"))


def read_trials(path) -> list:
    trials = []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 3 or cols[2] not in ("tgt", "non"):
            raise FormatError(f"{path}:{lineno}: expected enroll<TAB>test<TAB>{{tgt|non}}")
        trials.append((cols[0], cols[1], cols[2] == "tgt"))
    return trials


def write_trials(path, trials) -> None:
    text = "".join(f"{e}\t{t}\t{'tgt' if lab else 'non'}\n" for e, t, lab in trials)
    _atomic_write(path, text.encode("utf-8"))


def write_scores(path, rows) -> None:
    text = "".join(f"{e} {t} {s!r}\n" for e, t, s in rows)
    _atomic_write(path, text.encode("utf-8"))


def read_scores(path) -> list:
    rows = []
    for lineno, line in _data_lines(path):
        cols = line.split()
        if len(cols) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'enroll test score'")
        rows.append((cols[0], cols[1], float(cols[2])))
    return rows
