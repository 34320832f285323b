"""Trajectory ingestion: load, filter, chunk, pad, split, standardize.

A raw log is a CSV of per-frame pedestrian samples. Tracks are cut into
fixed-length chunks of ``d_c`` time points with six features per point
(x, y, vx, vy, ax, ay); short tails are zero-padded and flagged in a
per-chunk binary padding vector.
"""
from __future__ import annotations

import csv
import hashlib
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import FormatError, ParseError, SchemaError, SizeError
from .rng import named_stream

FEATURES = ("x", "y", "vx", "vy", "ax", "ay")
DEFAULT_COLUMNS = ("track_id", "frame") + FEATURES

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
_SPLIT_CODES = {SPLIT_TRAIN: 0, SPLIT_VAL: 1, SPLIT_TEST: 2, "": 255}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}

STORE_MAGIC = b"RPDC"
STORE_VERSION = 1


@dataclass
class RawTrack:
    """One pedestrian track: frame indices plus the six motion features."""

    track_id: str
    frames: np.ndarray          # (n,) int64, strictly increasing
    values: np.ndarray          # (n, 6) float64, columns in FEATURES order
    dt: float                   # seconds per frame step

    def __len__(self):
        return len(self.frames)


@dataclass
class TrajectoryChunk:
    """Fixed-length segment of a track with zero-padding flags.

    ``padding[i] == 1`` marks a real sample; padded rows are all zeros and
    form a contiguous suffix. Every chunk has at least two real rows.
    """

    values: np.ndarray          # (d_c, 6) float32
    padding: np.ndarray         # (d_c,) uint8
    track_id: str
    start_frame: int
    split: str = ""

    @property
    def chunk_id(self) -> str:
        return f"{self.track_id}:{self.start_frame}"

    @property
    def real_length(self) -> int:
        return int(self.padding.sum())


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    fractions: tuple = (0.70, 0.20, 0.10)
    seed: int = 0

    def all_chunks(self):
        return self.train + self.val + self.test


class ChunkingResult(NamedTuple):
    chunks: list
    skipped_tracks: int


def load_tracks(path, schema=None, frame_dt=0.1) -> list[RawTrack]:
    """Read a trajectory CSV into one RawTrack per track id.

    ``schema`` maps the logical column names in DEFAULT_COLUMNS to the
    file's actual header names; omitted entries default to the logical
    name itself. ``frame_dt`` is the capture interval for unit-spaced
    frames; wider regular spacing scales it.
    """
    schema = dict(schema or {})
    colmap = {name: schema.get(name, name) for name in DEFAULT_COLUMNS}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for logical, column in colmap.items():
            if column not in header:
                raise SchemaError(f"missing required column {logical!r} (mapped to {column!r})")
        rows_by_track: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            tid = row[colmap["track_id"]]
            try:
                frame = int(float(row[colmap["frame"]]))
                feats = [float(row[colmap[f]]) for f in FEATURES]
            except (TypeError, ValueError):
                raise ParseError(f"non-numeric value at line {lineno}") from None
            if not np.isfinite(feats).all():
                raise ParseError(f"non-finite value at line {lineno}")
            rows_by_track.setdefault(tid, []).append((frame, feats))

    tracks = []
    for tid in rows_by_track:
        rows = sorted(rows_by_track[tid], key=lambda r: r[0])
        frames = np.array([r[0] for r in rows], dtype=np.int64)
        if len(frames) > 1 and (np.diff(frames) <= 0).any():
            raise ParseError(f"track {tid!r} has duplicate frames")
        values = np.array([r[1] for r in rows], dtype=np.float64)
        spacing = int(np.median(np.diff(frames))) if len(frames) > 1 else 1
        tracks.append(RawTrack(tid, frames, values, dt=frame_dt * max(spacing, 1)))
    return tracks


def filter_stationary(tracks) -> list[RawTrack]:
    """Drop false detections whose vx and vy are zero for the whole track."""
    return [t for t in tracks if np.any(t.values[:, 2:4] != 0.0)]


def chunk_spans(n_samples: int, d_c: int):
    """Non-overlapping (start, length) windows; a tail shorter than 2 is dropped."""
    spans = []
    for start in range(0, n_samples, d_c):
        length = min(d_c, n_samples - start)
        if length >= 2:
            spans.append((start, length))
    return spans


def chunk_and_pad(tracks, d_c: int) -> ChunkingResult:
    """Cut tracks into zero-padded chunks of ``d_c`` consecutive samples.

    Windows never overlap and never straddle tracks. Tracks with fewer
    than 2 samples are skipped and counted.
    """
    if d_c < 2:
        raise SizeError(f"d_c must be >= 2, got {d_c}")
    chunks = []
    skipped = 0
    for track in tracks:
        n = len(track)
        if n < 2:
            skipped += 1
            continue
        for start, length in chunk_spans(n, d_c):
            values = np.zeros((d_c, 6), dtype=np.float32)
            values[:length] = track.values[start:start + length]
            padding = np.zeros(d_c, dtype=np.uint8)
            padding[:length] = 1
            chunks.append(TrajectoryChunk(
                values=values,
                padding=padding,
                track_id=track.track_id,
                start_frame=int(track.frames[start]),
            ))
    if skipped:
        warnings.warn(f"skipped {skipped} tracks shorter than 2 samples")
    return ChunkingResult(chunks, skipped)


def _stable_rank(chunk_id: str) -> int:
    return int.from_bytes(hashlib.sha256(chunk_id.encode()).digest()[:8], "big")


def split_dataset(chunks, seed: int, fractions=(0.70, 0.20, 0.10)) -> DatasetSplit:
    """Partition chunks into train/val/test.

    The test subset is fixed: membership depends only on each chunk's id
    (via a stable hash), never on the seed, so the held-out set is
    identical across experiments. Train and val are shuffled by seed.
    """
    n = len(chunks)
    if n < 10:
        raise SizeError(f"need at least 10 chunks to split, got {n}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SizeError(f"fractions must sum to 1, got {fractions}")

    n_test = round(fractions[2] * n)
    order = sorted(range(n), key=lambda i: (_stable_rank(chunks[i].chunk_id), chunks[i].chunk_id))
    test_idx = set(order[:n_test])

    rest = [i for i in range(n) if i not in test_idx]
    rng = named_stream(seed, "split")
    rng.shuffle(rest)
    n_train = round(fractions[0] * n)

    train = [replace(chunks[i], split=SPLIT_TRAIN) for i in rest[:n_train]]
    val = [replace(chunks[i], split=SPLIT_VAL) for i in rest[n_train:]]
    test = [replace(chunks[i], split=SPLIT_TEST) for i in order[:n_test]]
    return DatasetSplit(train=train, val=val, test=test, fractions=tuple(fractions), seed=seed)


@dataclass
class Standardizer:
    """Per-feature z-score statistics, fit on training data only."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    std: np.ndarray = field(default_factory=lambda: np.ones(6))

    @classmethod
    def fit(cls, chunks) -> "Standardizer":
        rows = np.concatenate([c.values[c.padding == 1] for c in chunks]).astype(np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(mean=mean, std=std)

    def transform(self, values, padding):
        """Standardize real rows; padded rows stay exactly zero."""
        out = (np.asarray(values, dtype=np.float64) - self.mean) / self.std
        out = out.astype(np.float32)
        out[np.asarray(padding) == 0] = 0.0
        return out

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


def save_chunk_store(path, chunks, d_c: int):
    """Serialize chunks to the binary chunk-store format.

    Layout: magic ``RPDC``, version u16, d_c u32, count u64, then per
    chunk the float32 little-endian row-major values, the uint8 padding
    flags, a length-prefixed track id, the start frame (i64), and a
    split tag byte.
    """
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<HIQ", STORE_VERSION, d_c, len(chunks)))
        for chunk in chunks:
            if chunk.values.shape != (d_c, 6):
                raise FormatError(f"chunk {chunk.chunk_id} has shape {chunk.values.shape}, expected {(d_c, 6)}")
            fh.write(chunk.values.astype("<f4").tobytes())
            fh.write(chunk.padding.astype(np.uint8).tobytes())
            tid = chunk.track_id.encode("utf-8")
            fh.write(struct.pack("<H", len(tid)))
            fh.write(tid)
            fh.write(struct.pack("<qB", chunk.start_frame, _SPLIT_CODES[chunk.split]))


def load_chunk_store(path):
    """Read a chunk store; returns (chunks, d_c)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != STORE_MAGIC:
            raise FormatError(f"{path}: not a chunk store (magic {magic!r})")
        version, d_c, count = struct.unpack("<HIQ", fh.read(14))
        if version != STORE_VERSION:
            raise FormatError(f"{path}: unsupported chunk store version {version}")
        chunks = []
        for _ in range(count):
            values = np.frombuffer(fh.read(d_c * 6 * 4), dtype="<f4").reshape(d_c, 6).copy()
            padding = np.frombuffer(fh.read(d_c), dtype=np.uint8).copy()
            (tid_len,) = struct.unpack("<H", fh.read(2))
            tid = fh.read(tid_len).decode("utf-8")
            start_frame, split_code = struct.unpack("<qB", fh.read(9))
            chunks.append(TrajectoryChunk(
                values=values, padding=padding, track_id=tid,
                start_frame=start_frame, split=_SPLIT_NAMES[split_code],
            ))
    return chunks, d_c
